"""Differentiable operations used by the fingerprinting networks.

Layouts are channels-last throughout: sequences are ``[batch, steps, features]``
and 1-D signals ``[batch, length, channels]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, op_result


class TrainingError(RuntimeError):
    pass


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"fully_connected: input width {x.shape[-1]} != weight rows {d_in}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        gx = (g2 @ w.data.T).reshape(lead + (d_in,)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return op_result(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return op_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def affine(x: Tensor, scale, offset) -> Tensor:
    """Fixed (non-learned) per-feature ``x * scale + offset``."""
    scale = np.asarray(scale, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    return op_result(x.data * scale + offset, (x,), lambda g: (g * scale,))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalise the trailing feature axis over every leading axis (batch and time)."""
    feats = x.shape[-1]
    if gamma.shape != (feats,) or beta.shape != (feats,):
        raise ShapeError(f"batch_norm: {feats} features but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.data.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise TrainingError("batch_norm in train mode needs a batch of at least 2")
        count = x.data.size // feats
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * count / max(count - 1, 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if train:
                gx = inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return op_result(out, (x, gamma, beta), backward)


def conv_output_length(length: int, k: int, stride: int) -> int:
    if length < k:
        raise ShapeError(f"length {length} shorter than kernel {k}")
    return (length - k) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation; ``x`` is ``[B, L, C_in]``, ``w`` is ``[k, C_in, C_out]``."""
    k, c_in, c_out = w.shape
    B, L, c = x.shape
    if c != c_in:
        raise ShapeError(f"conv1d: {c} input channels, kernel expects {c_in}")
    L_out = conv_output_length(L, k, stride)
    # [B, L_out, C_in, k] -> [B * L_out, k * C_in] ordered like w.reshape(k * C_in, C_out)
    win = sliding_window_view(x.data, k, axis=1)[:, : (L_out - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * L_out, k * c_in)
    wmat = w.data.reshape(k * c_in, c_out)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(B, L_out, c_out)

    def backward(g):
        g2 = g.reshape(B * L_out, c_out)
        gw = (cols.T @ g2).reshape(k, c_in, c_out) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, L_out, k, c_in)
            gx = np.zeros_like(x.data)
            stop = (L_out - 1) * stride + 1
            for j in range(k):
                gx[:, j : j + stop : stride] += dcols[:, :, j]
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return op_result(out, inputs, backward)


def avg_pool1d(x: Tensor, k: int, stride: int) -> Tensor:
    B, L, C = x.shape
    L_out = conv_output_length(L, k, stride)
    stop = (L_out - 1) * stride + 1
    out = np.zeros((B, L_out, C))
    for j in range(k):
        out += x.data[:, j : j + stop : stride]
    out /= k

    def backward(g):
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, j : j + stop : stride] += g / k
        return (gx,)

    return op_result(out, (x,), backward)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Single-layer LSTM from zero initial state; returns every hidden state.

    Gate blocks in the ``4h`` axis are ordered input, forget, cell candidate, output.
    """
    B, T, D = x.shape
    if w_x.shape[0] != D:
        raise ShapeError(f"lstm: input width {D} != w_x rows {w_x.shape[0]}")
    H = w_h.shape[0]
    if w_x.shape[1] != 4 * H or w_h.shape[1] != 4 * H or b.shape != (4 * H,):
        raise ShapeError("lstm: inconsistent gate parameter shapes")
    xw = (x.data.reshape(B * T, D) @ w_x.data + b.data).reshape(B, T, 4 * H)
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    tanh_c = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xw[:, t] + h @ w_h.data
        a = gates[:, t]
        a[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        cells[:, t] = c
        tanh_c[:, t] = np.tanh(c)
        h = a[:, 3 * H :] * tanh_c[:, t]
        hs[:, t] = h

    def backward(g):
        dz = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            a = gates[:, t]
            i, f, gc, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c[:, t] ** 2)
            c_prev = cells[:, t - 1] if t > 0 else np.zeros((B, H))
            d = dz[:, t]
            d[:, :H] = dc * gc * i * (1.0 - i)
            d[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            d[:, 2 * H : 3 * H] = dc * i * (1.0 - gc**2)
            d[:, 3 * H :] = dh * tanh_c[:, t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ w_h.data.T
        dz2 = dz.reshape(B * T, 4 * H)
        gx = (dz2 @ w_x.data.T).reshape(B, T, D) if x.requires_grad else None
        gwx = x.data.reshape(B * T, D).T @ dz2 if w_x.requires_grad else None
        gwh = None
        if w_h.requires_grad:
            h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1).reshape(B * T, H)
            gwh = h_prev.T @ dz2
        gb = dz2.sum(axis=0) if b.requires_grad else None
        return gx, gwx, gwh, gb

    return op_result(hs, (x, w_x, w_h, b), backward)


def lstm_param_count(d_in: int, hidden: int) -> int:
    return 4 * ((d_in + hidden) * hidden + hidden)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    orig = x.shape
    return op_result(out, (x,), lambda g: (g.reshape(orig),))


def flatten(x: Tensor, from_axis: int = 1) -> Tensor:
    return reshape(x, x.shape[:from_axis] + (-1,))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return op_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = 2.0 * g * diff / n
        return gp, (-gp if target.requires_grad else None)

    return op_result(np.asarray(np.sum(diff**2) / n), (pred, target), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add: shapes differ")
    return op_result(a.data + b.data, (a, b), lambda g: (g, g))


def total(x: Tensor) -> Tensor:
    return op_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights; handy for gradient probes."""
    weights = np.asarray(weights, dtype=np.float64)
    return op_result(np.asarray(np.sum(x.data * weights)), (x,), lambda g: (g * weights,))
