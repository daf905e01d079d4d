"""Parameter containers and attention building blocks on top of ``autodiff``.

Every block takes batched inputs shaped ``(B, N, d)``. Sharing a parameter set
between two places is done by referencing the same ``Module`` object;
``named_parameters`` de-duplicates by identity, so a shared block is counted,
saved and optimized once.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def named_parameters(self, prefix: str = "", _seen: set[int] | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item.named_parameters(f"{full}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def uniform_param(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform_param(rng, (d_in, d_out), bound, dtype)
        self.bias = uniform_param(rng, (d_out,), bound, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads.

    ``key_mask`` is ``(B, Nk)`` with True marking padded keys; ``causal`` masks
    keys after each query position (self-attention only). Returns the output
    ``(B, Nq, d)`` and the attention weights ``(B, heads, Nq, Nk)``.
    """

    def __init__(self, d: int, heads: int, rng, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, memory: Tensor, key_mask=None, causal: bool = False):
        if memory.shape[1] == 0:
            raise ValueError("attention over an empty key set")
        if query.shape[-1] != memory.shape[-1]:
            raise ad.ShapeError(f"attention: query {query.shape} and memory {memory.shape} widths differ")
        b, nq, d = query.shape
        nk = memory.shape[1]
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ad.scale(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(d // self.heads))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            cm = np.triu(np.ones((nq, nk), dtype=bool), k=1)[None, None]
            mask = cm if mask is None else (mask | cm)
        if mask is not None:
            scores = ad.masked_fill(scores, mask, -np.inf)
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.o(ctx), weights


class CrossAttnLayer(Module):
    """Pre-norm block: ``t + CA(LN(t), mem)`` followed by ``t + FFN(LN(t))``."""

    def __init__(self, d: int, heads: int, rng, dtype=np.float32, ffn_mult: int = 4):
        self.norm_q = LayerNorm(d, dtype)
        self.norm_mem = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_ff = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, ffn_mult * d, rng, dtype)

    def __call__(self, token: Tensor, memory: Tensor, key_mask=None):
        a, w = self.attn(self.norm_q(token), self.norm_mem(memory), key_mask)
        h = token + a
        return h + self.ffn(self.norm_ff(h)), w


class SelfAttnLayer(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float32, ffn_mult: int = 4):
        self.norm = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_ff = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, ffn_mult * d, rng, dtype)

    def __call__(self, x: Tensor, key_mask=None):
        n = self.norm(x)
        a, w = self.attn(n, n, key_mask)
        h = x + a
        return h + self.ffn(self.norm_ff(h)), w
