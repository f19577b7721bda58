"""Fused LSTM sequence kernel with hand-written backpropagation through time."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .ops import LstmWeights, concat_last
from .tensor import Tensor, record


def _sig(z):
    return 0.5 * np.tanh(0.5 * z) + 0.5


def lstm_sequence(x: Tensor, w: LstmWeights, reverse: bool = False) -> Tensor:
    """Run an LSTM over time from zero state; returns every hidden state.

    x: [T, I] or [B, T, I] -> [T, H] or [B, T, H]. With ``reverse`` the
    recurrence runs from the last frame to the first; outputs stay aligned
    with their input frames.
    """
    single = x.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or xd.shape[1] == 0:
        raise ShapeError(f"lstm_sequence: expected [B, T, I], got {x.shape}")
    w.check(xd.shape[-1])
    if reverse:
        xd = xd[:, ::-1]
    bsz, steps, _ = xd.shape
    hd = w.hidden
    W, U, b = w.W.data, w.U.data, w.b.data
    dtype = np.result_type(xd, W)

    # time-major buffers
    xs = np.ascontiguousarray(xd.transpose(1, 0, 2))
    xw = xs @ W
    gates = np.empty((steps, bsz, 4 * hd), dtype=dtype)
    cs = np.empty((steps, bsz, hd), dtype=dtype)
    tcs = np.empty_like(cs)
    hs = np.empty_like(cs)
    h = np.zeros((bsz, hd), dtype=dtype)
    c = np.zeros((bsz, hd), dtype=dtype)
    for t in range(steps):
        z = (xw[t] + h @ U) + b
        a = gates[t]
        a[:, :2 * hd] = _sig(z[:, :2 * hd])
        a[:, 2 * hd:3 * hd] = np.tanh(z[:, 2 * hd:3 * hd])
        a[:, 3 * hd:] = _sig(z[:, 3 * hd:])
        c = a[:, hd:2 * hd] * c + a[:, :hd] * a[:, 2 * hd:3 * hd]
        tc = np.tanh(c)
        h = a[:, 3 * hd:] * tc
        cs[t], tcs[t], hs[t] = c, tc, h

    out_bt = hs.transpose(1, 0, 2)
    if reverse:
        out_bt = out_bt[:, ::-1]
    out = Tensor(np.ascontiguousarray(out_bt[0] if single else out_bt))

    def backward(g):
        g3 = g[None] if single else g
        if reverse:
            g3 = g3[:, ::-1]
        gs = g3.transpose(1, 0, 2)
        dz_all = np.empty_like(gates)
        dU = np.zeros_like(U)
        dh_next = np.zeros((bsz, hd), dtype=dtype)
        dc_next = np.zeros((bsz, hd), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :hd], a[:, hd:2 * hd], a[:, 2 * hd:3 * hd], a[:, 3 * hd:]
            tc = tcs[t]
            c_prev = cs[t - 1] if t > 0 else np.zeros_like(dc_next)
            dh = gs[t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :hd] = dc * gg * i * (1 - i)
            dz[:, hd:2 * hd] = dc * c_prev * f * (1 - f)
            dz[:, 2 * hd:3 * hd] = dc * i * (1 - gg * gg)
            dz[:, 3 * hd:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            if t > 0:
                dU += hs[t - 1].T @ dz
            dh_next = dz @ U.T
        flat = dz_all.reshape(-1, 4 * hd)
        dW = xs.reshape(-1, xs.shape[-1]).T @ flat
        db = flat.sum(axis=0)
        dx = (dz_all @ W.T).transpose(1, 0, 2)
        if reverse:
            dx = dx[:, ::-1]
        dx = np.ascontiguousarray(dx[0] if single else dx)
        return dx, dW, dU, db

    return record(out, (x, w.W, w.U, w.b), backward, "lstm_sequence")


def bilstm(x: Tensor, fwd: LstmWeights, bwd: LstmWeights) -> Tensor:
    """Bidirectional LSTM: [..., T, I] -> [..., T, 2H] as [h_fwd(t) | h_bwd(t)]."""
    if fwd.hidden != bwd.hidden:
        raise ShapeError("bilstm: forward and backward hidden sizes differ")
    return concat_last([lstm_sequence(x, fwd), lstm_sequence(x, bwd, reverse=True)])
