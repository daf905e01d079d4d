"""Sentence-level knowledge bank built from training reports.

Bank file layout (little-endian)::

    b"BGKB" | u16 version | u32 d | u32 T
    T records: d * f32 embedding | u32 text length | UTF-8 text
    trailer:   u32 length | UTF-8 JSON provenance

The trailer is appended after the T records; readers that stop after the
records still see a valid bank.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Case, World, corpus_hash

MAGIC = b"BGKB"
VERSION = 1

# "." ends a sentence only when followed by whitespace or the end of text, so
# "m-8500/3", "3.5" and "10x" survive intact.
_BOUNDARY = re.compile(r"\.(?=\s|$)|;|\n")


class BankFormatError(ValueError):
    pass


class LeakageError(ValueError):
    pass


def split_sentences(report: str) -> list[str]:
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(report):
        end = m.end() if m.group() != "\n" else m.start()
        piece = report[start:end].strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = report[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


class SentenceEmbedder:
    """Text encoder stand-in: mean prototype of the tissues a sentence names, plus
    deterministic hash-seeded noise, L2-normalized."""

    def __init__(self, world: World):
        self.world = world
        self._names = sorted(((p.name, p.tissue_id) for p in world.prototypes), key=lambda nt: -len(nt[0]))

    def source_tissue(self, sentence: str) -> int | None:
        found = self._tissues(sentence)
        return found[0] if found else None

    def _tissues(self, sentence: str) -> list[int]:
        text = sentence.lower()
        hits = []
        for name, tid in self._names:
            pos = text.find(name)
            if pos >= 0:
                hits.append((pos, tid))
                text = text[:pos] + " " * len(name) + text[pos + len(name):]
        return [tid for _, tid in sorted(hits)]

    def embed(self, sentence: str) -> np.ndarray:
        w = self.world
        seed = int.from_bytes(hashlib.sha256(sentence.encode("utf-8")).digest()[:8], "little")
        noise = np.random.default_rng(seed).standard_normal(w.d)
        vecs = [w.prototypes[t].vector for t in self._tissues(sentence)]
        low = sentence.lower()
        if "her-2" in low:
            for status, vec in w.status_vectors.items():
                if status in low:
                    vecs.append(vec)
        if vecs:
            v = np.mean(vecs, axis=0) + w.sentence_noise * noise
        else:
            v = noise
        return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass(frozen=True)
class KnowledgeBank:
    embeddings: np.ndarray  # (T, d) unit rows
    sentences: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.sentences):
            raise ValueError(f"bank has {len(self.embeddings)} embeddings but {len(self.sentences)} sentences")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("bank embeddings contain non-finite values")
        self.embeddings.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.sentences)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def check_disjoint(self, cases: Sequence[Case]) -> None:
        """Raise if any of ``cases`` contributed sentences to the bank."""
        source = set(self.provenance.get("case_ids", ()))
        overlap = sorted(source & {c.case_id for c in cases})
        if overlap:
            raise LeakageError(f"bank built from evaluation cases: {overlap[:5]}")


def build_bank(train_cases: Sequence[Case], embedder: SentenceEmbedder, split: str = "train") -> KnowledgeBank:
    if split != "train":
        raise LeakageError(f"knowledge bank must be built from the train split, not '{split}'")
    if not train_cases:
        raise ValueError("cannot build a knowledge bank from an empty training set")
    sentences = [s for c in train_cases for s in split_sentences(c.report)]
    emb = np.stack([embedder.embed(s) for s in sentences]).astype(np.float32)
    prov = {"corpus_hash": corpus_hash(train_cases), "split": split,
            "case_ids": [c.case_id for c in train_cases]}
    return KnowledgeBank(emb, tuple(sentences), prov)


def dumps(bank: KnowledgeBank) -> bytes:
    out = [MAGIC, struct.pack("<HII", VERSION, bank.d, bank.T)]
    emb = np.ascontiguousarray(bank.embeddings, dtype="<f4")
    for row, text in zip(emb, bank.sentences):
        raw = text.encode("utf-8")
        out += [row.tobytes(), struct.pack("<I", len(raw)), raw]
    prov = json.dumps(bank.provenance, sort_keys=True).encode("utf-8")
    out += [struct.pack("<I", len(prov)), prov]
    return b"".join(out)


def loads(buf: bytes, expected_d: int | None = None) -> KnowledgeBank:
    if buf[:4] != MAGIC:
        raise BankFormatError(f"magic: expected {MAGIC!r}, found {buf[:4]!r}")
    version, d, T = struct.unpack_from("<HII", buf, 4)
    if version != VERSION:
        raise BankFormatError(f"version: unsupported bank version {version}")
    if expected_d is not None and d != expected_d:
        raise BankFormatError(f"d: bank width {d} does not match expected {expected_d}")
    pos = 14
    rows, texts = [], []
    try:
        for _ in range(T):
            rows.append(np.frombuffer(buf, dtype="<f4", count=d, offset=pos))
            pos += 4 * d
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            texts.append(buf[pos:pos + n].decode("utf-8"))
            pos += n
        prov = {}
        if pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            prov = json.loads(buf[pos + 4:pos + 4 + n].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise BankFormatError(f"records: truncated or corrupt bank ({exc})") from None
    emb = np.stack(rows).astype(np.float32) if rows else np.zeros((0, d), np.float32)
    return KnowledgeBank(emb, tuple(texts), prov)


def save_bank(path, bank: KnowledgeBank) -> None:
    Path(path).write_bytes(dumps(bank))


def load_bank(path, expected_d: int | None = None) -> KnowledgeBank:
    return loads(Path(path).read_bytes(), expected_d)
