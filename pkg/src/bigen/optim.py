"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class Adam:
    """Updates each distinct parameter storage once per ``step``.

    Parameters are keyed by identity, so a tensor reachable from several
    places (shared weights) is updated exactly once.
    """

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 5e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        unique: dict[int, Tensor] = {}
        for p in params:
            unique.setdefault(id(p), p)
        self.params = list(unique.values())
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter shape {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p.data -= (state.lr * state.weight_decay) * p.data
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
