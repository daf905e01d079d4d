"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(f: Callable[[], Tensor], param: Tensor, index, h: float = 1e-4) -> float:
    old = param.data[index].copy()
    with ad.no_grad():
        param.data[index] = old + h
        up = f().item()
        param.data[index] = old - h
        down = f().item()
    param.data[index] = old
    return (up - down) / (2 * h)


def kink_safe_grad(f: Callable[[], Tensor], param: Tensor, index, h: float = 1e-4, rtol: float = 1e-6,
                   max_shrinks: int = 3) -> float:
    """Central difference that shrinks the step while estimates at ``h`` and ``h/10``
    disagree. On a smooth stencil they agree to O(h^2); a ReLU kink inside
    ``[x - h, x + h]`` makes them differ, and a smaller step usually clears it.
    On agreement the coarser estimate is returned, as it carries less rounding noise."""
    est = numeric_grad(f, param, index, h)
    for _ in range(max_shrinks):
        h /= 10
        finer = numeric_grad(f, param, index, h)
        if abs(finer - est) <= rtol * max(1.0, abs(finer)):
            return est
        est = finer
    return est


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exactly-zero gradients
    (e.g. attention key biases, which softmax ignores) from dividing noise by noise."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                    samples_per_param: int | None = None, seed: int = 0,
                   kink_guard: bool = False) -> dict[int, float]:
    """Relative error between backprop and central differences, per parameter.

    ``samples_per_param`` limits the number of coordinates probed per tensor
    (chosen at random); ``None`` probes every coordinate. ``kink_guard`` uses
    :func:`kink_safe_grad`, for functions with piecewise-linear parts.
    """
    grads = ad.grad(f(), list(params))
    rng = np.random.default_rng(seed)
    errors = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        flat = np.arange(p.data.size)
        if samples_per_param is not None and p.data.size > samples_per_param:
            flat = rng.choice(flat, size=samples_per_param, replace=False)
        coords = [np.unravel_index(j, p.shape) for j in flat]
        fd = kink_safe_grad if kink_guard else numeric_grad
        num = np.array([fd(f, p, c, h) for c in coords])
        ana = np.array([g[c] for c in coords])
        errors[i] = relative_error(ana, num)
    return errors
