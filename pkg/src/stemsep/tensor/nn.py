"""Network primitives built on the autodiff core.

Convolutions accept [C, L] or batched [B, C, L] input and run as a short
loop over kernel taps (each tap is one batched matmul), which keeps both
the forward and the hand-written adjoints exact and fast enough on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from .core import (
    ShapeError,
    Tensor,
    channel_bias,
    concat,
    flip,
    matmul,
    narrow,
    reshape,
    sigmoid,
    tanh,
    transpose,
)

SQRT1_2 = float(np.sqrt(0.5))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def conv_out_len(L, K, stride, pad, dilation=1):
    return (L - dilation * (K - 1) - 1 + 2 * pad) // stride + 1


def _as_batched(x, name):
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"{name}: expected rank 2 or 3 input, got {x.shape}")


def conv1d(x, w, b=None, stride=1, dilation=1, pad=0):
    """1-d convolution, x: [B?, C_in, L], w: [C_out, C_in, K] -> [B?, C_out, L_out]."""
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv1d: stride/dilation must be >= 1, got {stride}/{dilation}")
    xb, squeeze = _as_batched(x, "conv1d")
    B, C_in, L = xb.shape
    C_out, wc_in, K = w.shape
    if wc_in != C_in:
        raise ShapeError(f"conv1d: input channels {C_in} != weight C_in {wc_in}")
    if b is not None and b.shape != (C_out,):
        raise ShapeError(f"conv1d: bias {b.shape} != (C_out,) = ({C_out},)")
    span = dilation * (K - 1) + 1
    if L + 2 * pad < span:
        raise ValueError(f"conv1d: padded length {L + 2 * pad} < kernel span {span}")
    L_out = conv_out_len(L, K, stride, pad, dilation)

    xd, wd = xb.data, w.data
    Lp = L + 2 * pad
    if pad:
        xp = np.zeros((B, C_in, Lp), dtype=xd.dtype)
        xp[:, :, pad : pad + L] = xd
    else:
        xp = xd
    out = np.zeros((B, C_out, L_out), dtype=xd.dtype)
    for k in range(K):
        sl = xp[:, :, k * dilation : k * dilation + stride * (L_out - 1) + 1 : stride]
        out += np.matmul(wd[:, :, k], sl)

    def vjp(g):
        gx = None
        gw = None
        if xb.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k * dilation : k * dilation + stride * (L_out - 1) + 1 : stride] += np.matmul(
                    wd[:, :, k].T, g
                )
            gx = gxp[:, :, pad : pad + L] if pad else gxp
        if w.requires_grad:
            gw = np.empty_like(wd)
            for k in range(K):
                sl = xp[:, :, k * dilation : k * dilation + stride * (L_out - 1) + 1 : stride]
                gw[:, :, k] = np.einsum("bol,bil->oi", g, sl, optimize=True)
        return (gx, gw)

    y = Tensor._node(out, (xb, w), vjp)
    if b is not None:
        y = channel_bias(y, b, axis=1)
    return reshape(y, y.shape[1:]) if squeeze else y


def conv1d_transposed(x, w, b=None, stride=1, pad=0):
    """Transposed 1-d convolution, x: [B?, C_in, L], w: [C_in, C_out, K].

    Adjoint of conv1d with the same stride/pad: output length
    (L-1)*stride + K - 2*pad.
    """
    if stride < 1:
        raise ValueError(f"conv1d_transposed: stride must be >= 1, got {stride}")
    xb, squeeze = _as_batched(x, "conv1d_transposed")
    B, C_in, L = xb.shape
    wc_in, C_out, K = w.shape
    if wc_in != C_in:
        raise ShapeError(f"conv1d_transposed: input channels {C_in} != weight C_in {wc_in}")
    if b is not None and b.shape != (C_out,):
        raise ShapeError(f"conv1d_transposed: bias {b.shape} != ({C_out},)")
    L_full = (L - 1) * stride + K
    L_out = L_full - 2 * pad
    if L_out < 1:
        raise ShapeError(f"conv1d_transposed: output length {L_out} < 1")

    xd, wd = xb.data, w.data
    full = np.zeros((B, C_out, L_full), dtype=xd.dtype)
    for k in range(K):
        full[:, :, k : k + stride * (L - 1) + 1 : stride] += np.matmul(wd[:, :, k].T, xd)
    out = full[:, :, pad : pad + L_out] if pad else full

    def vjp(g):
        if pad:
            gf = np.zeros((B, C_out, L_full), dtype=g.dtype)
            gf[:, :, pad : pad + L_out] = g
        else:
            gf = g
        gx = None
        gw = None
        if xb.requires_grad:
            gx = np.zeros_like(xd)
            for k in range(K):
                gx += np.matmul(wd[:, :, k], gf[:, :, k : k + stride * (L - 1) + 1 : stride])
        if w.requires_grad:
            gw = np.empty_like(wd)
            for k in range(K):
                sl = gf[:, :, k : k + stride * (L - 1) + 1 : stride]
                gw[:, :, k] = np.einsum("bil,bol->io", xd, sl, optimize=True)
        return (gx, gw)

    y = Tensor._node(out, (xb, w), vjp)
    if b is not None:
        y = channel_bias(y, b, axis=1)
    return reshape(y, y.shape[1:]) if squeeze else y


def linear(x, w, b=None):
    """Affine map along the last axis: x [.. , D_in] @ w[D_out, D_in]^T + b."""
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be rank 2, got {w.shape}")
    D_out, D_in = w.shape
    if x.shape[-1] != D_in:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight D_in {D_in}")
    if b is not None and b.shape != (D_out,):
        raise ShapeError(f"linear: bias {b.shape} != ({D_out},)")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, D_in)
    out = xd @ w.data.T

    def vjp(g):
        g2 = g.reshape(-1, D_out)
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ xd if w.requires_grad else None
        return (gx, gw)

    y = Tensor._node(out.reshape(lead + (D_out,)), (x, w), vjp)
    if b is not None:
        y = channel_bias(y, b, axis=y.ndim - 1)
    return y


# -- activations -------------------------------------------------------------


def relu(x):
    out = np.maximum(x.data, 0.0)
    return Tensor._node(out, (x,), lambda g: (g * (x.data > 0),))


def gelu(x):
    """Exact Gaussian-CDF GELU (keeps finite-difference checks clean)."""
    xd = x.data
    phi = 0.5 * (1.0 + _erf(xd * SQRT1_2))
    out = xd * phi

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * INV_SQRT_2PI
        return (g * (phi + xd * pdf),)

    return Tensor._node(out, (x,), vjp)


def softmax(x, axis):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._node(out, (x,), vjp)


def softplus(x):
    out = np.logaddexp(0.0, x.data)

    def vjp(g):
        from .core import _sigmoid_np

        return (g * _sigmoid_np(x.data),)

    return Tensor._node(out, (x,), vjp)


def glu(x, axis):
    """Gated linear unit: split along axis into (a, g), return a * sigmoid(g)."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} has odd size {n}")
    half = n // 2
    a = narrow(x, axis, 0, half)
    gate = narrow(x, axis, half, half)
    return a * sigmoid(gate)


_ACTIVATIONS = {"GELU", "ReLU", "Sigmoid", "Softmax", "GLU"}


def activation(kind, x, axis=None):
    """Dispatch by name; Softmax/GLU require an axis."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"activation: unknown kind {kind!r}")
    if kind == "GELU":
        return gelu(x)
    if kind == "ReLU":
        return relu(x)
    if kind == "Sigmoid":
        return sigmoid(x)
    if axis is None:
        raise ValueError(f"activation: {kind} requires an axis")
    if kind == "Softmax":
        return softmax(x, axis)
    return glu(x, axis)


# -- normalization ------------------------------------------------------------


def layer_norm(x, axis, gamma, beta, eps=1e-5):
    """Normalize to mean 0 / var 1 along one axis, then scale and shift."""
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({n},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = np.mean(xd, axis=axis, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv

    def vjp(g):
        gm = np.mean(g, axis=axis, keepdims=True)
        gxn = np.mean(g * xn, axis=axis, keepdims=True)
        return ((g - gm - xn * gxn) * inv,)

    y = Tensor._node(xn, (x,), vjp)
    y = channel_scale_axis(y, gamma, axis)
    return channel_bias(y, beta, axis)


def channel_scale_axis(x, s, axis):
    from .core import channel_scale

    return channel_scale(x, s, axis)


def group_norm(x, groups, gamma, beta, eps=1e-5, channel_axis=0):
    """Normalize per channel group over the group's channels and all
    trailing axes; axes before channel_axis are treated as batch."""
    C = x.shape[channel_axis]
    if C % groups:
        raise ShapeError(f"group_norm: channels {C} not divisible by groups {groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma/beta must be ({C},)")
    lead = x.shape[:channel_axis]
    rest = x.shape[channel_axis + 1 :]
    rest_n = int(np.prod(rest)) if rest else 1
    xg = reshape(x, lead + (groups, (C // groups) * rest_n))
    ax = len(lead) + 1

    xd = xg.data
    mu = np.mean(xd, axis=ax, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv

    def vjp(g):
        gm = np.mean(g, axis=ax, keepdims=True)
        gxn = np.mean(g * xn, axis=ax, keepdims=True)
        return ((g - gm - xn * gxn) * inv,)

    y = Tensor._node(xn, (xg,), vjp)
    y = reshape(y, x.shape)
    y = channel_scale_axis(y, gamma, channel_axis)
    return channel_bias(y, beta, channel_axis)


# -- recurrent ---------------------------------------------------------------


@dataclass
class LstmDirParams:
    """One direction of one layer. Gate order along rows: i, f, g, o."""

    w_ih: Tensor  # [4H, D_in]
    w_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]


@dataclass
class LstmParams:
    layers: list  # list of (forward: LstmDirParams, backward: LstmDirParams)

    @property
    def hidden(self):
        return self.layers[0][0].w_hh.shape[1]


def init_lstm(rng, d_in, hidden, layers, dtype=np.float32):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init, torch-style."""
    bound = 1.0 / np.sqrt(hidden)
    out = []
    for li in range(layers):
        din = d_in if li == 0 else 2 * hidden
        dirs = []
        for _ in range(2):
            w_ih = Tensor(rng.uniform(-bound, bound, (4 * hidden, din)).astype(dtype), requires_grad=True)
            w_hh = Tensor(rng.uniform(-bound, bound, (4 * hidden, hidden)).astype(dtype), requires_grad=True)
            bias = Tensor(rng.uniform(-bound, bound, (4 * hidden,)).astype(dtype), requires_grad=True)
            dirs.append(LstmDirParams(w_ih, w_hh, bias))
        out.append(tuple(dirs))
    return LstmParams(out)


def _lstm_direction(x, p, hidden):
    """x: [B, T, D] -> [B, T, H] running left to right."""
    B, T, _ = x.shape
    zeros = Tensor(np.zeros((B, hidden), dtype=x.dtype))
    h, c = zeros, zeros
    w_ih_t = transpose(p.w_ih, (1, 0))
    w_hh_t = transpose(p.w_hh, (1, 0))
    outs = []
    for t in range(T):
        xt = reshape(narrow(x, 1, t, 1), (B, x.shape[2]))
        gates = channel_bias(matmul(xt, w_ih_t) + matmul(h, w_hh_t), p.bias, axis=1)
        i = sigmoid(narrow(gates, 1, 0, hidden))
        f = sigmoid(narrow(gates, 1, hidden, hidden))
        g = tanh(narrow(gates, 1, 2 * hidden, hidden))
        o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
        c = f * c + i * g
        h = o * tanh(c)
        outs.append(reshape(h, (B, 1, hidden)))
    return concat(outs, axis=1)


def bilstm(x, params):
    """Bidirectional multi-layer LSTM.

    x: [T, D] or [B, T, D]; returns [.., T, 2H] (forward and backward
    halves concatenated per step).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"bilstm: expected [B, T, D], got {x.shape}")
    hidden = params.hidden
    out = x
    for fw, bw in params.layers:
        fwd = _lstm_direction(out, fw, hidden)
        rev = flip(_lstm_direction(flip(out, 1), bw, hidden), 1)
        out = concat([fwd, rev], axis=2)
    return reshape(out, out.shape[1:]) if squeeze else out
