"""Multi-modal report decoder and autoregressive generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, uniform_param


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class DecoderLayer(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float32, ffn_mult: int = 4):
        self.norm_self = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_cross = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_ff = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, ffn_mult * d, rng, dtype)

    def __call__(self, y: Tensor, memory: Tensor, memory_mask=None):
        n = self.norm_self(y)
        a, _ = self.self_attn(n, n, causal=True)
        y = y + a
        c, w = self.cross_attn(self.norm_cross(y), memory, memory_mask)
        y = y + c
        return y + self.ffn(self.norm_ff(y)), w


class ReportDecoder(Module):
    """Masked self-attention over the report prefix, cross-attention to the encoder memory."""

    def __init__(self, vocab_size: int, d: int, heads: int, L: int, rng, dtype=np.float32, ffn_mult: int = 4):
        self.d = d
        self.vocab_size = vocab_size
        self.token_embedding = uniform_param(rng, (vocab_size, d), 1.0 / math.sqrt(d), dtype)
        self.layers = [DecoderLayer(d, heads, rng, dtype, ffn_mult) for _ in range(L)]
        self.final_norm = LayerNorm(d, dtype)
        self.out = Linear(d, vocab_size, rng, dtype)
        self.dtype = dtype
        self._pe = sinusoidal_positions(512, d).astype(dtype)

    def _positions(self, n: int) -> np.ndarray:
        if n > len(self._pe):
            self._pe = sinusoidal_positions(2 * n, self.d).astype(self.dtype)
        return self._pe[:n]

    def forward(self, memory: Tensor, tokens: np.ndarray, memory_mask=None, return_attention: bool = False):
        """Teacher-forced logits ``(B, N, vocab)`` for input token ids ``(B, N)``."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ValueError(f"decoder needs a non-empty (B, N) token array, got shape {tokens.shape}")
        x = ad.scale(ad.embedding(self.token_embedding, tokens), math.sqrt(self.d))
        x = x + Tensor(self._positions(tokens.shape[1]))
        cross = []
        for layer in self.layers:
            x, w = layer(x, memory, memory_mask)
            cross.append(w.data)
        logits = self.out(self.final_norm(x))
        return (logits, cross) if return_attention else logits


def nll_loss(logits: Tensor, targets: np.ndarray, pad_id: int | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` (PAD positions excluded)."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ad.ShapeError(f"nll_loss: logits {logits.shape} do not match targets {targets.shape}")
    logp = ad.log_softmax(logits, axis=-1)
    idx = tuple(np.indices(targets.shape)) + (targets,)
    picked = logp[idx]
    if pad_id is not None:
        keep = (targets != pad_id).astype(logits.dtype)
        picked = picked * Tensor(keep)
    return -ad.sum_(picked)


# -- generation ---------------------------------------------------------------
StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, BOS excluded
    logprobs: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.logprobs))

    @property
    def score(self) -> float:
        return self.total / max(len(self.tokens), 1)


def _mask_banned(lp: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    if banned:
        lp = lp.copy()
        lp[..., list(banned)] = -np.inf
    return lp


def greedy_search(step: StepFn, bos: int, eos: int, max_len: int, banned: Sequence[int] = ()) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    hyp = Hypothesis([], [])
    for _ in range(max_len):
        lp = _mask_banned(step([[bos] + hyp.tokens])[0], banned)
        tok = int(np.argmax(lp))
        hyp.tokens.append(tok)
        hyp.logprobs.append(float(lp[tok]))
        if tok == eos:
            break
    return hyp


def beam_search(step: StepFn, bos: int, eos: int, beam: int, max_len: int,
                banned: Sequence[int] = ()) -> Hypothesis:
    """Beam search ranked by cumulative log-prob during expansion and by
    length-normalized log-prob among finished hypotheses.

    Candidates are visited best-first; EOS candidates met before the beam is
    refilled are finalized, the rest become the next live beam. Hypotheses
    still live at ``max_len`` are finalized as-is.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis([], [])]
    done: list[Hypothesis] = []
    for t in range(max_len):
        lp = _mask_banned(step([[bos] + h.tokens for h in live]), banned)
        totals = np.array([h.total for h in live])[:, None] + lp
        flat = totals.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))
        nxt: list[Hypothesis] = []
        V = lp.shape[1]
        for pos in order:
            if not np.isfinite(flat[pos]):
                break
            i, w = divmod(int(pos), V)
            h = Hypothesis(live[i].tokens + [w], live[i].logprobs + [float(lp[i, w])])
            if w == eos or t == max_len - 1:
                done.append(h)
            else:
                nxt.append(h)
            if len(nxt) == beam:
                break
        live = nxt
        if not live or len(done) >= beam:
            break
    best = done[0]
    for h in done[1:]:
        if h.score > best.score:
            best = h
    return best
