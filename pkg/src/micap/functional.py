"""Fused differentiable ops used by the models: losses, normalisation, convolution, pooling."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _stable_sigmoid, gelu, relu, sigmoid  # noqa: F401


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    ``mask`` must broadcast against ``x``. A row with every entry masked yields zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    y = (e / np.where(denom > 0, denom, 1.0)).astype(x.dtype)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x V, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ValueError(f"{targets.shape[0]} targets for {n} rows")
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    if not valid.any():
        raise ValueError("every row is ignored; the mean loss is undefined")
    bad = valid & ((targets < 0) | (targets >= v))
    if bad.any():
        raise ValueError(f"target {targets[bad][0]} outside [0, {v})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.nonzero(valid)[0]
    count = rows.size
    nll = lse[rows] - z[rows, targets[rows]]
    out = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets[rows]] -= 1.0
        p[~valid] = 0.0
        return ((p * (g / count)).astype(logits.dtype),)

    return Tensor._make(out, (logits,), bw, "softmax_xent")


def sigmoid_binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean per-element binary cross-entropy for multi-label heads."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} do not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(loss.sum() / n, dtype=logits.dtype)

    def bw(g):
        return ((_stable_sigmoid(z) - y) * (g / n),)

    return Tensor._make(out, (logits,), bw, "sigmoid_bce")


def _norm_backward(g_hat, x_hat, rstd, axes, count):
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * x_hat).sum(axis=axes, keepdims=True)
    return rstd / count * (count * g_hat - s1 - x_hat * s2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    x_hat = xc * rstd
    out = x_hat * gamma.data + beta.data
    h = x.shape[-1]

    def bw(g):
        gx = _norm_backward(g * gamma.data, x_hat, rstd, -1, h)
        flat_g = g.reshape(-1, h)
        return gx, (flat_g * x_hat.reshape(-1, h)).sum(axis=0), flat_g.sum(axis=0)

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 1 of an ``N x C`` or ``N x C x H x W`` input.

    In training mode the running buffers are updated in place (biased variance,
    so inference on the training batch reproduces training-mode outputs once
    the buffers have converged).
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
        xc = x.data - mu
    rstd = 1.0 / np.sqrt(var + eps)
    x_hat = xc * rstd
    out = x_hat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        g_hat = g * gamma.data.reshape(bshape)
        if training:
            gx = _norm_backward(g_hat, x_hat, rstd, axes, count)
        else:
            gx = g_hat * rstd
        return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``B x C x H x W`` input with ``F x C x k x k`` filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    b, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d: weight {w.shape} does not fit input {x.shape}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{wd}, k={k}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * k * k, b * ho * wo)
    w2 = w.data.reshape(f, c * k * k)
    out = (w2 @ cols2).reshape(f, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, b * ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape)
        dcols = (w2.T @ g2).reshape(c, k, k, b, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._make(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    b, c, h, wd = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"max_pool2d: non-positive output extent for input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    windows = np.stack([xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                        for i in range(k) for j in range(k)])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for n in range(k * k):
            i, j = divmod(n, k)
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == n)
        return (gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``B x C x h x w`` to ``B x C`` spatial mean."""
    return x.mean(axis=(2, 3))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id outside [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._make(out, (table,), bw, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit random stream")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
