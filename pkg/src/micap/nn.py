"""Parameter containers, layers, and the Adam optimizer."""
from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, Module) and not key.startswith("_"):
                yield from val.named_buffers(f"{prefix}{key}.")
        for key, val in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", val

    def modules(self) -> Iterator[Module]:
        yield self
        for key, val in vars(self).items():
            if isinstance(val, Module) and not key.startswith("_"):
                yield from val.modules()

    def _resolve(self, dotted: str) -> tuple[Module, str]:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = getattr(mod, part)
        return mod, leaf

    def get_parameter(self, dotted: str) -> Tensor:
        mod, leaf = self._resolve(dotted)
        return getattr(mod, leaf)

    def set_parameter(self, dotted: str, value: Tensor):
        mod, leaf = self._resolve(dotted)
        setattr(mod, leaf, value)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for name, p in list(self.named_parameters()):
            self.set_parameter(name, Tensor(p.data.astype(dtype), requires_grad=p.requires_grad))
        for m in self.modules():
            buffers = getattr(m, "_buffers", None)
            if buffers:
                for k in buffers:
                    buffers[k] = buffers[k].astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True, order="C")
        for name, b in buffers.items():
            b[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, items: Iterable[Module]):
        for i, m in enumerate(items):
            setattr(self, str(i), m)

    def __len__(self):
        return sum(1 for k in vars(self) if k.isdigit())

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(len(self)))

    def __getitem__(self, i):
        return getattr(self, str(i))


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None, dtype=np.float32):
        if std is None:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        else:
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float32):
        self.gamma = _param(np.ones(width), dtype)
        self.beta = _param(np.zeros(width), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.momentum = momentum
        self._buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                         "running_var": np.ones(channels, dtype=dtype)}

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, dtype=np.float32):
        fan_in = c_in * k * k
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)), dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, stride=self.stride, pad=self.pad)


class Embedding(Module):
    def __init__(self, n: int, width: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.table = _param(rng.normal(0.0, std, size=(n, width)), dtype)

    def __call__(self, ids) -> Tensor:
        return F.embedding(self.table, ids)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class EarlyStopping:
    """Tracks the best value seen; ``should_stop`` once ``patience`` checks pass without improvement."""

    def __init__(self, patience: int = 10, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.bad_checks = 0

    def step(self, value: float) -> bool:
        better = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if better:
            self.best = value
            self.bad_checks = 0
        else:
            self.bad_checks += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_checks >= self.patience
