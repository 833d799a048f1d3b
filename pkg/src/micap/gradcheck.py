"""Central finite-difference checks against autodiff gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(auto - numeric) / denom)) if auto.size else 0.0


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float, coords: Sequence[int] | None = None) -> np.ndarray:
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f().data)
        flat[i] = orig - eps
        down = float(f().data)
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``.

    ``x`` must be float64. ``f`` is re-evaluated with ``x`` perturbed in place.
    """
    if x.dtype != np.float64:
        raise TypeError("finite_diff_check needs a float64 input")
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    auto = x.grad.reshape(-1).copy()
    x.grad = None
    numeric = numeric_grad(lambda: f(x), x, eps)
    return relative_error(auto, numeric)


def check_parameters(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], n_samples: int,
                     rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Finite-difference check on ``n_samples`` coordinates drawn across ``params``.

    ``loss_fn`` rebuilds the loss from the current parameter values.
    """
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    picks = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    auto, numeric = [], []
    for flat_idx in np.sort(picks):
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p = params[names[k]]
        i = int(flat_idx - offsets[k])
        g = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
        auto.append(g)
        numeric.append(numeric_grad(loss_fn, p, eps, [i])[0])
    for p in params.values():
        p.grad = None
    return relative_error(np.array(auto), np.array(numeric))
