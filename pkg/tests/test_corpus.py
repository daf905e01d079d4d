from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigen.bank import SentenceEmbedder, split_sentences
from bigen.corpus import (
    BACKGROUND, SPECIALS, build_vocab, corpus_hash, generate_corpus, load_corpus, load_split_manifest, make_world,
    save_corpus, save_split_manifest, split_dataset, tokenize,
)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(1, 40)


def test_same_seed_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        w, cs = generate_corpus(1, 12)
        save_corpus(tmp_path / f"{name}.jsonl", w, cs)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seed_differs():
    assert corpus_hash(generate_corpus(1, 5)[1]) != corpus_hash(generate_corpus(2, 5)[1])


def test_single_tissue_reports_use_only_its_templates():
    w, cs = generate_corpus(3, 20, tissue_count=1)
    allowed = set(w.prototypes[0].templates)
    for c in cs:
        sents = split_sentences(c.report)
        assert set(sents[:-1]) <= allowed
        assert sents[-1].startswith("her-2 status")


def test_report_mentions_exactly_the_tissues_above_threshold(small):
    w, cs = small
    for c in cs:
        counts = Counter(t for t in c.tissue_ids.tolist() if t != BACKGROUND)
        n = sum(counts.values())
        expected = {t for t, k in counts.items() if k / n >= w.mention_threshold}
        emb = SentenceEmbedder(w)
        named = {emb.source_tissue(s) for s in split_sentences(c.report)} - {None}
        assert named == expected


def test_grid_shape_matches_patch_count(small):
    _, cs = small
    for c in cs:
        assert c.grid[0] * c.grid[1] == c.M >= 1
        assert c.visual.shape == c.retrieval.shape == (c.M, 32)
        assert c.positions()[c.grid[1]] == (1, 0)


def test_zero_tissues_is_an_error():
    with pytest.raises(ValueError):
        generate_corpus(0, 5, tissue_count=0)


def test_spatial_neighbours_share_tissue_more_than_chance():
    _, cs = generate_corpus(5, 100)
    agree, pairs, chance = 0, 0, []
    for c in cs:
        grid = c.tissue_ids.reshape(c.grid)
        h = grid[:, 1:] == grid[:, :-1]
        v = grid[1:, :] == grid[:-1, :]
        agree += h.sum() + v.sum()
        pairs += h.size + v.size
        p = np.array(list(Counter(c.tissue_ids.tolist()).values())) / c.M
        chance.append((p**2).sum())
    assert agree / pairs > np.mean(chance) + 0.2


def test_visual_and_retrieval_views_are_distinct(small):
    _, cs = small
    c = cs[0]
    assert not np.allclose(c.visual, c.retrieval)


def test_retrieval_view_is_aligned_with_sentence_embeddings():
    w, cs = generate_corpus(7, 30)
    emb = SentenceEmbedder(w)
    sent = {t: emb.embed(p.templates[0]) for t, p in enumerate(w.prototypes)}
    rng = np.random.default_rng(0)
    same, diff = [], []
    for _ in range(1000):
        c = cs[rng.integers(len(cs))]
        i = rng.integers(c.M)
        t = int(c.tissue_ids[i])
        if t == BACKGROUND:
            continue
        x = c.retrieval[i] / np.linalg.norm(c.retrieval[i])
        other = int(rng.choice([u for u in sent if u != t]))
        same.append(x @ sent[t])
        diff.append(x @ sent[other])
    assert len(same) > 300
    assert np.mean(same) > np.mean(diff) + 0.3


# -- splits -----------------------------------------------------------------
def test_default_split_sizes():
    _, cs = generate_corpus(0, 977, patches_per_case_range=(4, 4))
    tr, va, te = split_dataset(cs)
    assert (len(tr), len(va), len(te)) == (796, 88, 93)


def test_ten_cases_split():
    _, cs = generate_corpus(0, 10, patches_per_case_range=(4, 4))
    tr, va, te = split_dataset(cs)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_multi_case_patient_lands_in_one_split():
    _, cs = generate_corpus(0, 30, patches_per_case_range=(4, 4))
    for c in cs[:5]:
        c.patient_id = "patient-shared"
    tr, va, te = split_dataset(cs, seed=3)
    homes = [name for name, part in (("tr", tr), ("va", va), ("te", te))
             if any(c.patient_id == "patient-shared" for c in part)]
    assert len(homes) == 1
    assert sum(c.patient_id == "patient-shared" for c in tr + va + te) == 5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rate=st.floats(0, 0.8))
def test_splits_are_patient_disjoint(seed, rate):
    _, cs = generate_corpus(seed % 50, 40, patches_per_case_range=(4, 4), multi_case_rate=rate)
    tr, va, te = split_dataset(cs, seed)
    p = [{c.patient_id for c in part} for part in (tr, va, te)]
    assert not (p[0] & p[1]) and not (p[0] & p[2]) and not (p[1] & p[2])
    assert len(tr) + len(va) + len(te) == len(cs)


def test_split_ignores_input_order():
    _, cs = generate_corpus(0, 50, patches_per_case_range=(4, 4))
    a = split_dataset(cs, 9)
    b = split_dataset(list(reversed(cs)), 9)
    for x, y in zip(a, b):
        assert sorted(c.case_id for c in x) == sorted(c.case_id for c in y)


def test_too_few_patients():
    _, cs = generate_corpus(0, 2, patches_per_case_range=(4, 4))
    with pytest.raises(ValueError, match="3 patients"):
        split_dataset(cs)


# -- vocabulary -------------------------------------------------------------
def test_round_trip():
    v = build_vocab(["invasive ductal carcinoma"])
    assert v.decode(v.encode("invasive ductal carcinoma")) == "invasive ductal carcinoma"


def test_encode_wraps_with_bos_eos():
    v = build_vocab(["a b"])
    ids = v.encode("a b")
    assert ids[0] == v.bos and ids[-1] == v.eos


def test_rare_word_maps_to_unk():
    v = build_vocab(["common common rare"], min_freq=2)
    assert v.encode("rare")[1] == v.unk
    assert v.encode("common")[1] != v.unk


def test_vocab_size_counts_qualifying_words(small):
    _, cs = small
    reports = [c.report for c in cs]
    for min_freq in (1, 3, 10):
        counts = {}
        for r in reports:
            for w in r.lower().replace(",", " , ").replace(".", " . ").replace(":", " : ").split():
                counts[w] = counts.get(w, 0) + 1
        qualifying = {w for w, n in counts.items() if n >= min_freq}
        assert len(build_vocab(reports, min_freq)) == len(qualifying) + 4


def test_specials_present_once(small):
    v = build_vocab([c.report for c in small[1]])
    assert [v.itos.count(s) for s in SPECIALS] == [1, 1, 1, 1]
    assert list(v.stoi.values()) == list(range(len(v)))


def test_decode_unknown_id_errors():
    v = build_vocab(["a"])
    with pytest.raises(KeyError):
        v.decode([999])


def test_codes_survive_tokenisation():
    assert "m-8500/3" in tokenize("morphology m-8500/3.")
    assert tokenize("her-2 status: positive.") == ["her-2", "status", ":", "positive", "."]


# -- persistence ------------------------------------------------------------
def test_corpus_file_round_trip(tmp_path, small):
    w, cs = small
    save_corpus(tmp_path / "c.jsonl", w, cs)
    w2, cs2 = load_corpus(tmp_path / "c.jsonl")
    assert corpus_hash(cs2) == corpus_hash(cs)
    np.testing.assert_array_equal(cs2[3].visual, cs[3].visual)
    assert w2.header() == w.header()


def test_split_manifest(tmp_path, small):
    tr, va, te = split_dataset(small[1])
    save_split_manifest(tmp_path / "s.json", tr, va, te)
    man = load_split_manifest(tmp_path / "s.json")
    assert man["val"] == [c.case_id for c in va]


# -- visual families ----------------------------------------------------------------
def test_visual_families_share_a_prototype():
    world = make_world(0, 8, 16)
    table = world.visual_table()
    assert np.array_equal(table[0], table[1]) and np.array_equal(table[6], table[7])
    assert not np.allclose(table[0], table[2])
    assert np.array_equal(table[-1], world.background)


def test_family_of_one_keeps_every_tissue_apart():
    world = make_world(0, 8, 16, visual_family=1)
    table = world.visual_table()
    np.testing.assert_array_equal(table[:-1], np.stack([p.vector for p in world.prototypes]))


def test_family_size_must_be_positive():
    with pytest.raises(ValueError):
        make_world(0, 8, 16, visual_family=0)


def test_paired_tissues_look_alike_but_retrieve_apart():
    world, cases = generate_corpus(4, 60, patches_per_case_range=(64, 128), d=16)
    vis = {t: [] for t in (0, 1)}
    ret = {t: [] for t in (0, 1)}
    for c in cases:
        for t in (0, 1):
            vis[t].append(c.visual[c.tissue_ids == t])
            ret[t].append(c.retrieval[c.tissue_ids == t])
    mv = [np.concatenate(vis[t]).mean(0) for t in (0, 1)]
    mr = [np.concatenate(ret[t]).mean(0) for t in (0, 1)]
    assert np.linalg.norm(mv[0] - mv[1]) < 0.1
    assert np.linalg.norm(mr[0] - mr[1]) > 0.5


def test_family_size_survives_the_corpus_file(tmp_path):
    world, cases = generate_corpus(1, 3, patches_per_case_range=(4, 8), d=8)
    save_corpus(tmp_path / "c.jsonl", world, cases)
    back, _ = load_corpus(tmp_path / "c.jsonl")
    assert back.visual_family == world.visual_family == 2
