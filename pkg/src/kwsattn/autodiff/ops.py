"""Differentiable primitives. Every op computes its forward value with numpy and
registers a closure producing input gradients from the output gradient.

Shapes are explicit: the only broadcasting allowed is adding a 1-D bias along
the last axis. Ops accept optional leading batch axes where noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor, as_tensor, record


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [k, n] -> [..., m, n]."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1]) if a.ndim > 1 else np.outer(a.data, g)
        return ga, gb

    return record(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal shapes, or ``a`` plus a bias vector over its last axis."""
    a, b = as_tensor(a), as_tensor(b)
    bias = a.shape != b.shape
    if bias and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    out = Tensor(a.data + b.data)

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return record(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    out = Tensor(x.data * c)
    return record(out, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    y = half * np.tanh(half * x.data) + half
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * (1 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.dtype.type(0)))
    return record(out, (x,), lambda g: (g * mask,), "relu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), backward, "softmax")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` is [C] with an int target or [B, C] with B int targets.
    """
    _check_finite(logits.data, "cross_entropy")
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = z.shape
    if c < 2 or t.shape != (n,) or (t < 0).any() or (t >= c).any():
        raise ShapeError(f"cross_entropy: bad target {target!r} for logits {logits.shape}")
    logp = log_softmax_np(z)
    rows = np.arange(n)
    loss = -logp[rows, t].sum() / n
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        p *= g / n
        return (p[0] if single else p,)

    return record(out, (logits,), backward, "cross_entropy")


def total(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    out = Tensor(np.take(x.data, index, axis=axis))

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return record(out, (x,), backward, "take")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[..., start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return record(out, (x,), backward, "slice_last")


def concat_last(parts: list[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeError(f"concat_last: leading shapes differ {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record(out, tuple(parts), backward, "concat_last")


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def dot_scores(values: Tensor, query: Tensor) -> Tensor:
    """Inner product of every row of values [..., T, D] with query [..., D] -> [..., T]."""
    if values.shape[:-2] + values.shape[-1:] != query.shape:
        raise ShapeError(f"dot_scores: values {values.shape} vs query {query.shape}")
    out = Tensor(np.matmul(values.data, query.data[..., None])[..., 0])

    def backward(g):
        gv = g[..., :, None] * query.data[..., None, :]
        gq = np.matmul(g[..., None, :], values.data)[..., 0, :]
        return gv, gq

    return record(out, (values, query), backward, "dot_scores")


def mean_weighted(values: Tensor, weights: Tensor) -> Tensor:
    """Sum over time of weights[t] * values[t]: [..., T, D], [..., T] -> [..., D]."""
    if values.shape[:-1] != weights.shape:
        raise ShapeError(f"mean_weighted: values {values.shape} vs weights {weights.shape}")
    out = Tensor(np.matmul(weights.data[..., None, :], values.data)[..., 0, :])

    def backward(g):
        gv = weights.data[..., :, None] * g[..., None, :]
        gw = np.matmul(values.data, g[..., None])[..., 0]
        return gv, gw

    return record(out, (values, weights), backward, "mean_weighted")


def conv_time(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded convolution along time only.

    x: [T, F, Cin] or [B, T, F, Cin]; kernels: [kt, 1, Cin, Cout]; bias: [Cout].
    out[t, f, co] = bias[co] + sum_{dt, ci} x[t + dt - kt//2, f, ci] * kernels[dt, 0, ci, co]
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv_time: bad ranks x={x.shape} kernels={kernels.shape}")
    kt, kf, cin, cout = kernels.shape
    if kf != 1 or kt % 2 == 0 or xd.shape[-1] != cin or bias.shape != (cout,):
        raise ShapeError(f"conv_time: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    b, t, f, _ = xd.shape
    half = kt // 2
    xp = np.zeros((b, t + 2 * half, f, cin), dtype=xd.dtype)
    xp[:, half:half + t] = xd
    w = kernels.data[:, 0]
    y = np.empty((b, t, f, cout), dtype=np.result_type(xd, w))
    y[...] = bias.data
    for dt in range(kt):
        y += xp[:, dt:dt + t] @ w[dt]
    out = Tensor(y[0] if single else y)

    def backward(g):
        g4 = g[None] if single else g
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dt in range(kt):
                gxp[:, dt:dt + t] += g4 @ w[dt].T
            gx = gxp[:, half:half + t]
            gx = gx[0] if single else gx
        if kernels.requires_grad:
            g2 = g4.reshape(-1, cout)
            gk = np.empty_like(kernels.data)
            for dt in range(kt):
                gk[dt, 0] = xp[:, dt:dt + t].reshape(-1, cin).T @ g2
        if bias.requires_grad:
            gb = g4.reshape(-1, cout).sum(axis=0)
        return gx, gk, gb

    return record(out, (x, kernels, bias), backward, "conv_time")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over every axis but the last.

    In train mode the batch statistics are used and the running statistics
    in ``state`` are updated in place; infer mode reads them.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} vs channels {c}")
    if x.data.size == 0:
        raise ShapeError("batch_norm: empty batch")
    axes = tuple(range(x.ndim - 1))
    eps = x.dtype.type(state.eps)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(gamma.data * xhat + beta.data)
    n = x.data.size // c

    def backward(g):
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gbeta = g.reshape(-1, c).sum(axis=0)
        gxhat = g * gamma.data
        if mode == "train":
            gx = inv / n * (n * gxhat - gxhat.reshape(-1, c).sum(axis=0)
                            - xhat * (gxhat * xhat).reshape(-1, c).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gbeta

    return record(out, (x, gamma, beta), backward, "batch_norm")


@dataclass
class LstmWeights:
    W: Tensor  # [I, 4H], gate order (input, forget, cell, output)
    U: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def check(self, n_in: int) -> None:
        h = self.hidden
        if self.W.shape != (n_in, 4 * h) or self.U.shape != (h, 4 * h) or self.b.shape != (4 * h,):
            raise ShapeError(
                f"LSTM weights W{self.W.shape} U{self.U.shape} b{self.b.shape} "
                f"do not fit input size {n_in}")


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, w: LstmWeights) -> tuple[Tensor, Tensor]:
    """One LSTM cell update composed from primitive ops.

    c = f * c_prev + i * tanh(g);  h = o * tanh(c)
    """
    w.check(x_t.shape[-1])
    hd = w.hidden
    if h_prev.shape != x_t.shape[:-1] + (hd,) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} for hidden {hd}")
    z = add(add(matmul(x_t, w.W), matmul(h_prev, w.U)), w.b)
    i = sigmoid(slice_last(z, 0, hd))
    f = sigmoid(slice_last(z, hd, 2 * hd))
    g = tanh(slice_last(z, 2 * hd, 3 * hd))
    o = sigmoid(slice_last(z, 3 * hd, 4 * hd))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c
