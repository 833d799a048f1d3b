"""Random-subspace training and intrinsic-dimension estimation.

A model's trainable parameters are re-expressed as ``theta_base + P theta_d``
where ``theta_base`` is the frozen initialisation and ``P`` is an implicit
Fastfood projection (``S H G Pi H B``) per parameter tensor. Only the
``d``-dimensional ``theta_d`` is optimised.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import chi

from .nn import Adam, Module
from .rng import make_generator
from .tensor import Tensor, no_grad


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, math.ceil(math.log2(max(n, 1))))


def fwht(x) -> np.ndarray:
    """Unnormalised Walsh-Hadamard transform (Sylvester order) along the last axis."""
    out = np.array(x, dtype=np.float64 if np.asarray(x).dtype.kind != "f" else None)
    n = out.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"fwht needs a power-of-two length, got {n}")
    lead = out.shape[:-1]
    h = 1
    while h < n:
        y = out.reshape(lead + (n // (2 * h), 2, h))
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] += b
        y[..., 1, :] = a - b
        h *= 2
    return out


@dataclass
class FastfoodBlock:
    offset: int
    n: int
    L: int
    signs: np.ndarray
    perm: np.ndarray
    gauss: np.ndarray
    scale: np.ndarray

    @classmethod
    def draw(cls, offset: int, n: int, d: int, rng: np.random.Generator) -> FastfoodBlock:
        L = next_power_of_two(max(n, d))
        signs = rng.choice(np.array([-1.0, 1.0]), size=L)
        perm = rng.permutation(L)
        gauss = rng.standard_normal(L)
        s = chi.rvs(L, size=L, random_state=rng)
        # columns of the truncated n x d map get unit expected squared norm
        scale = s / (np.linalg.norm(gauss) * math.sqrt(L * n))
        return cls(offset, n, L, signs, perm, gauss, scale)


def fastfood_project(theta_d: np.ndarray, block: FastfoodBlock) -> np.ndarray:
    """Map a ``d`` vector to the block's ``n`` parameter offsets."""
    d = theta_d.shape[-1]
    if d > block.L:
        raise ValueError(f"subspace dimension {d} exceeds block length {block.L}")
    v = np.zeros(block.L)
    v[:d] = theta_d
    v = fwht(v * block.signs)
    v = fwht(v[block.perm] * block.gauss)
    return (v * block.scale)[: block.n]


def fastfood_adjoint(y: np.ndarray, block: FastfoodBlock, d: int) -> np.ndarray:
    """Transpose of ``fastfood_project``: an ``n`` vector back to ``d`` coordinates."""
    v = np.zeros(block.L)
    v[: block.n] = y
    v = fwht(v * block.scale) * block.gauss
    u = np.empty(block.L)
    u[block.perm] = v
    return (fwht(u) * block.signs)[:d]


def _project_op(theta: Tensor, block: FastfoodBlock) -> Tensor:
    out = fastfood_project(theta.data, block).astype(theta.dtype)

    def bw(g):
        return (fastfood_adjoint(g, block, theta.shape[0]).astype(theta.dtype),)

    return Tensor._make(out, (theta,), bw, "fastfood")


@dataclass
class SubspaceConfig:
    D: int
    d: int
    seed: int
    names: list[str] = field(default_factory=list)
    blocks: list[FastfoodBlock] = field(default_factory=list)

    @classmethod
    def build(cls, shapes: list[tuple[str, tuple]], d: int, seed: int) -> SubspaceConfig:
        if d < 1:
            raise ValueError(f"subspace dimension must be >= 1, got {d}")
        cfg = cls(D=0, d=d, seed=seed)
        for i, (name, shape) in enumerate(shapes):
            n = int(np.prod(shape)) if shape else 1
            cfg.blocks.append(FastfoodBlock.draw(cfg.D, n, d, make_generator(seed, "fastfood", i)))
            cfg.names.append(name)
            cfg.D += n
        return cfg


class SubspaceModel:
    """Wraps ``model`` so that its effective parameters are ``base + P theta_d``.

    Call ``refresh()`` before each forward pass; it rebinds every parameter of
    the underlying model to a differentiable function of ``theta``.
    """

    def __init__(self, model: Module, d: int, seed: int):
        self.model = model
        named = list(model.named_parameters())
        self.config = SubspaceConfig.build([(n, p.shape) for n, p in named], d, seed)
        dtype = named[0][1].dtype if named else np.float32
        self.base = {n: Tensor(p.data.copy()) for n, p in named}
        self.theta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.theta]

    def refresh(self) -> Module:
        for name, block in zip(self.config.names, self.config.blocks):
            base = self.base[name]
            delta = _project_op(self.theta, block).reshape(base.shape)
            self.model.set_parameter(name, base + delta)
        return self.model

    def __call__(self, *args, **kwargs):
        return self.refresh()(*args, **kwargs)


def wrap_parameters(model: Module, d: int, seed: int) -> SubspaceModel:
    return SubspaceModel(model, d, seed)


def projection_matrix(block: FastfoodBlock, d: int) -> np.ndarray:
    """Dense ``n x d`` matrix of the implicit projection (for checks only)."""
    return np.stack([fastfood_project(np.eye(d)[j], block) for j in range(d)], axis=1)


# -- sweeps -------------------------------------------------------------------

@dataclass
class Budget:
    steps: int
    lr: float = 1e-3


class SubspaceTask(Protocol):
    name: str

    def build_model(self, seed: int) -> Module: ...

    def loss(self, model: Module, step: int) -> Tensor: ...

    def metric(self, model: Module) -> float: ...


@dataclass
class SweepCurve:
    task: str
    baseline: float
    points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        ds = [d for d, _ in self.points]
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError("sweep d values must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d", "metric", "baseline"])
        for d, m in self.points:
            w.writerow([d, repr(float(m)), repr(float(self.baseline))])
        return buf.getvalue()

    def summary(self, threshold: float = 0.9) -> dict:
        out = {"task": self.task, "baseline": self.baseline, "d_90": intrinsic_dimension(self, threshold)}
        if len(self.points) >= 2 and self.baseline > 0:
            out["auc"] = normalized_auc(self)
            out["complexity"] = relative_complexity(self)
        else:
            out["auc"] = out["complexity"] = None
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _train(task: SubspaceTask, params: list[Tensor], model_fn: Callable[[], Module], budget: Budget) -> float:
    opt = Adam(params, lr=budget.lr)
    for step in range(budget.steps):
        opt.zero_grad()
        loss = task.loss(model_fn(), step)
        if not np.isfinite(loss.item()):
            break
        loss.backward()
        opt.step()
    with no_grad():
        metric = float(task.metric(model_fn()))
    return metric if np.isfinite(metric) else 0.0


def train_full(task: SubspaceTask, budget: Budget, seed: int = 0) -> float:
    model = task.build_model(seed)
    return _train(task, model.parameters(), lambda: model, budget)


def train_in_subspace(task: SubspaceTask, d: int, budget: Budget, seed: int = 0) -> float:
    wrapped = wrap_parameters(task.build_model(seed), d, seed)
    return _train(task, wrapped.parameters(), wrapped.refresh, budget)


def run_sweep(task: SubspaceTask, d_values, budget: Budget, seed: int = 0,
              baseline: float | None = None) -> SweepCurve:
    """Train in a random subspace for every ``d`` under a fixed step budget."""
    if baseline is None:
        baseline = train_full(task, budget, seed)
    points = [(int(d), train_in_subspace(task, int(d), budget, seed)) for d in sorted(set(d_values))]
    return SweepCurve(task.name, float(baseline), points)


def normalized_auc(curve: SweepCurve) -> float:
    if len(curve.points) < 2:
        raise ValueError("area under the curve needs at least two points")
    if curve.baseline <= 0:
        raise ValueError(f"baseline metric must be positive, got {curve.baseline}")
    d = np.array([p[0] for p in curve.points], dtype=np.float64)
    m = np.array([p[1] for p in curve.points], dtype=np.float64) / curve.baseline
    x = (d - d[0]) / (d[-1] - d[0])
    return float(trapezoid(m, x))


def relative_complexity(curve: SweepCurve) -> float:
    """Inverse of the normalised area under the metric-vs-d curve."""
    return 1.0 / max(normalized_auc(curve), 1e-6)


def intrinsic_dimension(curve: SweepCurve, threshold: float = 0.9) -> int | None:
    """Smallest swept ``d`` reaching ``threshold`` of the baseline metric."""
    for d, m in curve.points:
        if m >= threshold * curve.baseline:
            return d
    return None
