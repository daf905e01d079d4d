"""Attention-guided knowledge retrieval.

Top-k patches (by layer-1 attention) are put back in spatial order, pooled into
regions of ``m`` consecutive patches, and each region mean queries the bank for
its ``v`` most cosine-similar sentences, whose embeddings are averaged. All of
this is plain numpy: no gradient flows through the selection or the bank.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .bank import KnowledgeBank


@dataclass(frozen=True)
class RetrievalConfig:
    k: float = 0.4
    m: int = 20
    v: int = 3

    def __post_init__(self):
        if not 0 < self.k <= 1:
            raise ValueError(f"selection ratio k={self.k} must lie in (0, 1]")
        if self.m < 1:
            raise ValueError(f"region size m={self.m} must be >= 1")
        if self.v < 1:
            raise ValueError(f"neighbour count v={self.v} must be >= 1")


@dataclass
class RetrievedKnowledge:
    selected: np.ndarray  # patch indices in spatial order
    region_features: np.ndarray  # (n_r, d)
    features: np.ndarray  # R, (n_r, d)
    indices: np.ndarray  # (n_r, v) bank rows, best first
    similarities: np.ndarray  # (n_r, v), non-increasing per row

    @property
    def n_regions(self) -> int:
        return len(self.features)

    def region_members(self, m: int) -> list[np.ndarray]:
        return [self.selected[i:i + m] for i in range(0, len(self.selected), m)]


def n_selected(M: int, k: float) -> int:
    # tolerance keeps e.g. 10 * 0.7 = 7.000000000000001 from rounding up to 8
    return max(1, math.ceil(M * k - 1e-9))


def select_top_k(attention: np.ndarray, k: float) -> np.ndarray:
    attention = np.asarray(attention, dtype=np.float64)
    M = attention.shape[0]
    if M == 0:
        raise ValueError("cannot select patches from an empty attention vector")
    if not 0 < k <= 1:
        raise ValueError(f"selection ratio k={k} must lie in (0, 1]")
    order = np.lexsort((np.arange(M), -attention))  # score desc, index asc
    return np.sort(order[: n_selected(M, k)])


def partition_regions(P: np.ndarray, m: int) -> np.ndarray:
    if m < 1:
        raise ValueError(f"region size m={m} must be >= 1")
    P = np.asarray(P)
    if len(P) == 0:
        raise ValueError("cannot partition an empty patch set")
    return np.stack([P[i:i + m].mean(axis=0) for i in range(0, len(P), m)])


def retrieve_region(query: np.ndarray, bank: KnowledgeBank, v: int):
    """Return (mean of top-v bank rows, their indices, their cosine similarities)."""
    if bank.T == 0:
        raise ValueError("knowledge bank is empty")
    if v > bank.T:
        raise ValueError(f"v={v} exceeds bank size T={bank.T}")
    q = np.asarray(query, dtype=np.float64)
    sims = bank.embeddings.astype(np.float64) @ q / np.linalg.norm(q)
    top = np.lexsort((np.arange(bank.T), -sims))[:v]
    rbar = bank.embeddings[top].astype(np.float64).mean(axis=0)
    return rbar, top, sims[top]


def retrieve_all(retrieval_embeddings: np.ndarray, attention: np.ndarray, bank: KnowledgeBank,
                 config: RetrievalConfig) -> RetrievedKnowledge:
    selected = select_top_k(attention, config.k)
    regions = partition_regions(np.asarray(retrieval_embeddings)[selected], config.m)
    feats, idx, sims = [], [], []
    for q in regions:
        rbar, top, s = retrieve_region(q, bank, config.v)
        feats.append(rbar)
        idx.append(top)
        sims.append(s)
    return RetrievedKnowledge(selected=selected, region_features=regions, features=np.stack(feats),
                              indices=np.stack(idx), similarities=np.stack(sims))


def dump_debug(fh, case_id: str, rk: RetrievedKnowledge, bank: KnowledgeBank, m: int) -> None:
    """Write one JSON line per region: its patches, retrieved sentences and similarities."""
    for r, members in enumerate(rk.region_members(m)):
        fh.write(json.dumps({
            "case_id": case_id, "region": r, "patches": members.tolist(),
            "sentences": [bank.sentences[i] for i in rk.indices[r]],
            "similarities": [round(float(s), 6) for s in rk.similarities[r]],
        }) + "\n")
