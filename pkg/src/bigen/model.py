"""Full report generator: encoder memory feeding the report decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import KnowledgeBank
from .corpus import Case, Vocab
from .decoder import Hypothesis, ReportDecoder, beam_search, greedy_search, nll_loss
from .encoder import BiGenEncoder, EncoderConfig, EncoderOutput
from .nn import Module
from .retrieval import RetrievalConfig


@dataclass
class Batch:
    case_ids: list[str]
    visual: list[np.ndarray]
    retrieval: list[np.ndarray]
    inputs: np.ndarray  # (B, N) starting with BOS
    targets: np.ndarray  # (B, N) shifted by one, PAD padded

    @classmethod
    def from_cases(cls, cases: Sequence[Case], vocab: Vocab) -> "Batch":
        seqs = [vocab.encode(c.report) for c in cases]
        n = max(len(s) for s in seqs) - 1
        inputs = np.full((len(seqs), n), vocab.pad, dtype=np.int64)
        targets = np.full((len(seqs), n), vocab.pad, dtype=np.int64)
        for i, s in enumerate(seqs):
            inputs[i, : len(s) - 1] = s[:-1]
            targets[i, : len(s) - 1] = s[1:]
        return cls([c.case_id for c in cases], [c.visual for c in cases], [c.retrieval for c in cases],
                   inputs, targets)


class BiGenModel(Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int, d_in: int, d_bank: int, seed: int = 0,
                 dtype=np.float32, rcfg: RetrievalConfig | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.rcfg = rcfg or RetrievalConfig()
        self.encoder = BiGenEncoder(cfg, d_in, d_bank, rng, dtype)
        self.decoder = ReportDecoder(vocab_size, cfg.d, cfg.heads, cfg.L, rng, dtype, cfg.ffn_mult)
        self.dtype = dtype

    def encode(self, visual, retrieval=None, bank: KnowledgeBank | None = None) -> EncoderOutput:
        return self.encoder.encode(visual, retrieval, bank, self.rcfg)

    def logits(self, batch: Batch, bank: KnowledgeBank | None = None) -> Tensor:
        enc = self.encode(batch.visual, batch.retrieval, bank)
        return self.decoder.forward(enc.memory, batch.inputs, enc.memory_mask)

    def loss(self, batch: Batch, bank: KnowledgeBank | None = None, pad_id: int = 0) -> Tensor:
        return nll_loss(self.logits(batch, bank), batch.targets, pad_id)

    # -- generation -----------------------------------------------------------
    def _step_fn(self, enc: EncoderOutput, row: int):
        mem = enc.memory.data[row : row + 1]
        mmask = None if enc.memory_mask is None else enc.memory_mask[row : row + 1]

        def step(prefixes):
            toks = np.asarray(prefixes, dtype=np.int64)
            n = len(toks)
            with ad.no_grad():
                logits = self.decoder.forward(Tensor(np.repeat(mem, n, axis=0)), toks,
                                              None if mmask is None else np.repeat(mmask, n, axis=0))
            last = logits.data[:, -1, :].astype(np.float64)
            last = last - last.max(axis=1, keepdims=True)
            return last - np.log(np.exp(last).sum(axis=1, keepdims=True))

        return step

    def generate(self, cases: Sequence[Case], vocab: Vocab, bank: KnowledgeBank | None = None,
                 beam: int = 3, max_len: int = 64) -> list[Hypothesis]:
        with ad.no_grad():
            enc = self.encode([c.visual for c in cases], [c.retrieval for c in cases], bank)
        banned = (vocab.bos, vocab.pad)
        out = []
        for row in range(len(cases)):
            step = self._step_fn(enc, row)
            if beam == 1:
                out.append(greedy_search(step, vocab.bos, vocab.eos, max_len, banned))
            else:
                out.append(beam_search(step, vocab.bos, vocab.eos, beam, max_len, banned))
        return out

    def generate_greedy_batch(self, cases: Sequence[Case], vocab: Vocab, bank: KnowledgeBank | None = None,
                              max_len: int = 64) -> list[list[int]]:
        """Greedy decoding of many cases at once (same result as ``generate(beam=1)``)."""
        with ad.no_grad():
            enc = self.encode([c.visual for c in cases], [c.retrieval for c in cases], bank)
            B = len(cases)
            toks = np.full((B, 1), vocab.bos, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logits = self.decoder.forward(enc.memory, toks, enc.memory_mask).data[:, -1, :].copy()
                logits[:, [vocab.bos, vocab.pad]] = -np.inf
                nxt = logits.argmax(axis=1)
                nxt[done] = vocab.pad
                toks = np.concatenate([toks, nxt[:, None]], axis=1)
                done |= nxt == vocab.eos
                if done.all():
                    break
        result = []
        for row in toks[:, 1:]:
            seq = []
            for t in row:
                if t == vocab.pad:
                    break
                seq.append(int(t))
                if t == vocab.eos:
                    break
            result.append(seq)
        return result
