import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigen.bank import (
    BankFormatError, KnowledgeBank, LeakageError, SentenceEmbedder, build_bank, dumps, load_bank, loads,
    save_bank, split_sentences,
)
from bigen.corpus import BACKGROUND, generate_corpus, split_dataset


@pytest.fixture(scope="module")
def data():
    world, cases = generate_corpus(2, 60, patches_per_case_range=(16, 32))
    tr, va, te = split_dataset(cases)
    return world, tr, va, te, build_bank(tr, SentenceEmbedder(world))


def test_two_sentences():
    assert split_sentences("Invasive carcinoma. Margins negative.") == ["Invasive carcinoma.", "Margins negative."]


def test_code_is_not_a_terminator():
    assert split_sentences("m-8500/3 noted.") == ["m-8500/3 noted."]


def test_decimals_survive():
    assert split_sentences("tumour 3.5 cm at 10x. done") == ["tumour 3.5 cm at 10x.", "done"]


def test_no_terminator_is_one_sentence():
    assert split_sentences("no terminator here") == ["no terminator here"]


def test_semicolon_and_newline():
    assert split_sentences("a; b\nc.") == ["a;", "b", "c."]


def test_empty_report():
    assert split_sentences("") == []


def test_sentences_reconstruct_generated_reports(data):
    for c in data[1]:
        parts = split_sentences(c.report)
        assert all(parts)
        assert " ".join(parts) == c.report


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="ab .;", min_size=1, max_size=8), min_size=1, max_size=6))
def test_split_loses_only_whitespace(pieces):
    report = " ".join(pieces)
    parts = split_sentences(report)
    assert all(p.strip() == p and p for p in parts)
    assert "".join(parts).replace(" ", "") == report.replace(" ", "")


# -- embedder -------------------------------------------------------------------
def test_embedding_deterministic_and_unit(data):
    emb = SentenceEmbedder(data[0])
    a = emb.embed("fibrous stroma is seen at the periphery.")
    b = emb.embed("fibrous stroma is seen at the periphery.")
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-6


def test_tissue_sentences_align_with_their_prototype():
    # Monte-Carlo over worlds and every template sentence
    cosines = []
    for seed in range(20):
        world, _ = generate_corpus(seed, 1, patches_per_case_range=(4, 4))
        emb = SentenceEmbedder(world)
        for p in world.prototypes:
            for t in p.templates:
                cosines.append(float(emb.embed(t) @ p.vector))
    assert min(cosines) >= 0.5


def test_longest_name_wins(data):
    emb = SentenceEmbedder(data[0])
    names = {p.name: p.tissue_id for p in data[0].prototypes}
    s = "ductal carcinoma in situ is focally present."
    assert emb.source_tissue(s) == names["ductal carcinoma in situ"]


# -- bank ------------------------------------------------------------------------
def test_row_count_is_total_sentence_count(data):
    _, tr, *_, bank = data
    assert bank.T == sum(len(split_sentences(c.report)) for c in tr)
    assert len(bank.sentences) == bank.embeddings.shape[0]


def test_full_size_bank_count():
    # independent count: one sentence per mentioned tissue plus the Her-2 line
    world, cases = generate_corpus(0, 977, patches_per_case_range=(16, 64))
    tr, _, _ = split_dataset(cases)
    bank = build_bank(tr, SentenceEmbedder(world))
    expected = 0
    for c in tr:
        diag = c.tissue_ids[c.tissue_ids != BACKGROUND]
        _, counts = np.unique(diag, return_counts=True)
        expected += int((counts / max(len(diag), 1) >= world.mention_threshold).sum()) + 1
    assert len(tr) == 796
    assert bank.T == expected
    assert 2.0 < bank.T / len(tr) < 5.0


def test_rows_are_unit_so_cosine_is_dot(data):
    bank = data[4]
    q = np.random.default_rng(0).standard_normal(bank.d)
    q /= np.linalg.norm(q)
    e = bank.embeddings.astype(np.float64)
    cos = e @ q / (np.linalg.norm(e, axis=1) * np.linalg.norm(q))
    np.testing.assert_allclose(cos, e @ q, atol=1e-6)


def test_bank_is_read_only(data):
    with pytest.raises(ValueError):
        data[4].embeddings[0, 0] = 1.0


def test_empty_train_set_errors(data):
    with pytest.raises(ValueError):
        build_bank([], SentenceEmbedder(data[0]))


def test_building_from_eval_split_is_refused(data):
    with pytest.raises(LeakageError):
        build_bank(data[2], SentenceEmbedder(data[0]), split="val")


def test_leakage_guard(data):
    _, tr, va, te, bank = data
    bank.check_disjoint(va + te)
    with pytest.raises(LeakageError):
        bank.check_disjoint(te + tr[:1])


def test_provenance_lists_train_cases(data):
    _, tr, *_, bank = data
    assert set(bank.provenance["case_ids"]) == {c.case_id for c in tr}


def test_round_trip_bit_exact(tmp_path, data):
    bank = data[4]
    save_bank(tmp_path / "b.bgkb", bank)
    back = load_bank(tmp_path / "b.bgkb", expected_d=bank.d)
    assert back.embeddings.tobytes() == bank.embeddings.tobytes()
    assert back.sentences == bank.sentences
    assert back.provenance == bank.provenance
    assert dumps(back) == dumps(bank)


def test_layout_header(data):
    buf = dumps(data[4])
    assert buf[:4] == b"BGKB"
    assert struct.unpack_from("<HII", buf, 4) == (1, data[4].d, data[4].T)


@pytest.mark.parametrize("field,mutate,kw", [
    ("magic", lambda b: b"XXXX" + b[4:], {}),
    ("version", lambda b: b[:4] + struct.pack("<H", 9) + b[6:], {}),
    ("d", lambda b: b, {"expected_d": 7}),
    ("records", lambda b: b[:40], {}),
])
def test_bad_files_name_the_field(data, field, mutate, kw):
    with pytest.raises(BankFormatError, match=f"^{field}:"):
        loads(mutate(dumps(data[4])), **kw)


def test_mismatched_rows_rejected():
    with pytest.raises(ValueError):
        KnowledgeBank(np.zeros((2, 3), np.float32), ("a",))


def test_non_finite_rows_rejected():
    with pytest.raises(ValueError):
        KnowledgeBank(np.full((1, 3), np.nan, np.float32), ("a",))
