"""Seeded end-to-end experiment helpers shared by scripts, CLI and acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bank import KnowledgeBank, SentenceEmbedder, build_bank
from .corpus import BACKGROUND, Case, Vocab, World, build_vocab, generate_corpus, split_dataset
from .encoder import ABLATION_ROWS
from .model import BiGenModel
from .trainer import TrainConfig, average_improvement, run_ablation, run_sweep, train

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    world: World
    train: list[Case]
    val: list[Case]
    test: list[Case]
    vocab: Vocab
    bank: KnowledgeBank


def prepare(seed: int, n_cases: int = 256, tissue_count: int = 8, d: int = 32,
            patches: tuple[int, int] = (64, 256), min_freq: int = 1) -> Prepared:
    world, cases = generate_corpus(seed, n_cases, tissue_count, patches, d)
    train, val, test = split_dataset(cases, seed)
    vocab = build_vocab([c.report for c in train], min_freq)
    bank = build_bank(train, SentenceEmbedder(world))
    return Prepared(world, train, val, test, vocab, bank)


def seeded_ablation(base: TrainConfig, seeds: Sequence[int], n_cases: int = 256,
                    rows: Sequence[dict] = ABLATION_ROWS, corpus_d: int = 32, **corpus_kw) -> list[dict]:
    """Ablation grid where seed ``s`` fixes both the corpus and the model initialisation.

    Every row sees the same corpora, so row differences are paired per seed.
    """
    per_seed = []
    for s in seeds:
        data = prepare(s, n_cases, d=corpus_d, **corpus_kw)
        res = run_ablation(replace(base, seed=s), data.train, data.val, data.test, data.vocab, data.bank,
                           rows=rows, seeds=(s,))
        per_seed.append(res)
        log.info("seed %d done: %s", s, [round(r["metrics"]["bleu4"], 4) for r in res])
    out = []
    for i, flags in enumerate(rows):
        runs = [ps[i]["metrics"] for ps in per_seed]
        mean = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
        out.append({"flags": dict(flags), "metrics": mean, "per_seed": runs})
    for r in out:
        r["avg_delta"] = None if r is out[0] else average_improvement(r["metrics"], out[0]["metrics"])
    return out


def seeded_sweep(base: TrainConfig, param: str, values: Sequence, seeds: Sequence[int], n_cases: int = 256,
                 corpus_d: int = 32, **corpus_kw) -> list[dict]:
    points: dict = {}
    for s in seeds:
        data = prepare(s, n_cases, d=corpus_d, **corpus_kw)
        for p in run_sweep(replace(base, seed=s), param, values, data.train, data.val, data.test,
                           data.vocab, data.bank):
            points.setdefault(p["value"], []).append(p["metrics"])
    return [{"param": param, "value": v,
             "metrics": {k: float(np.mean([m[k] for m in ms])) for k in ms[0]}}
            for v, ms in points.items()]


def dominant_tissue(tissue_ids: np.ndarray) -> int:
    """Most frequent label, ties broken towards the smaller id (so BACKGROUND wins ties)."""
    labels, counts = np.unique(tissue_ids, return_counts=True)
    return int(labels[np.argmax(counts)])


@dataclass
class Fidelity:
    hits: int
    regions: int
    background_regions: int

    @property
    def rate(self) -> float:
        return self.hits / self.regions if self.regions else float("nan")


def retrieval_fidelity(model: BiGenModel, cases: Sequence[Case], bank: KnowledgeBank,
                       embedder: SentenceEmbedder) -> Fidelity:
    """Share of retrieval regions where most of the v retrieved sentences name the
    region's dominant tissue. Regions dominated by background patches have no
    tissue to match and are counted separately."""
    with ad.no_grad():
        enc = model.encode([c.visual for c in cases], [c.retrieval for c in cases], bank)
    source = [embedder.source_tissue(s) for s in bank.sentences]
    hits = regions = background = 0
    for case, rk in zip(cases, enc.retrieved):
        for members, idx in zip(rk.region_members(model.rcfg.m), rk.indices):
            dom = dominant_tissue(case.tissue_ids[members])
            if dom == BACKGROUND:
                background += 1
                continue
            regions += 1
            hits += sum(source[t] == dom for t in idx) * 2 > len(idx)
    return Fidelity(hits, regions, background)


def seeded_fidelity(base: TrainConfig, seeds: Sequence[int], n_cases: int = 256, corpus_d: int = 32,
                    **corpus_kw) -> list[Fidelity]:
    """Train the full configuration per seed, then score retrieval on held-out cases."""
    out = []
    for s in seeds:
        data = prepare(s, n_cases, d=corpus_d, **corpus_kw)
        res = train(replace(base, seed=s), data.train, data.val, data.vocab, data.bank)
        fid = retrieval_fidelity(res.model, data.val + data.test, data.bank, SentenceEmbedder(data.world))
        log.info("seed %d fidelity %.4f over %d regions (%d background)", s, fid.rate, fid.regions,
                 fid.background_regions)
        out.append(fid)
    return out
