"""Stateless kernels shared by the teacher and student networks.

All functions operate on numpy arrays. Batched inputs put the batch axes first
and the feature axis last.
"""
from __future__ import annotations

import numpy as np


class NoLegalActionError(ValueError):
    """Raised when a mask leaves no admissible entry."""


class DivergenceInfiniteError(ValueError):
    """Raised when q assigns zero mass where p is positive."""


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def masked_temperature_softmax(logits, mask, tau: float = 1.0) -> np.ndarray:
    logits = np.asarray(logits)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    mask = np.asarray(mask).astype(bool)
    if logits.shape[-1] != mask.shape[-1]:
        raise ValueError(f"logits/mask length mismatch: {logits.shape} vs {mask.shape}")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    mask = np.broadcast_to(mask, logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise NoLegalActionError("no legal action: mask has no set bit")
    z = np.where(mask, logits / logits.dtype.type(tau), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0)
    return (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype, copy=False)


def masked_softmax_backward(p: np.ndarray, dp: np.ndarray, tau: float) -> np.ndarray:
    """Vector-Jacobian product of masked_temperature_softmax w.r.t. the logits."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / tau


def kl_divergence(p, q) -> np.ndarray | float:
    """KL(p || q) along the last axis with 0*ln(0/.) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise DivergenceInfiniteError("q has zero mass where p > 0 (mask mismatch)")
    log_ratio = np.log(np.where(support, p, 1.0)) - np.log(np.where(support, q, 1.0))
    terms = np.where(support, p * log_ratio, 0.0)
    kl = terms.sum(axis=-1)
    kl = np.where(kl < 0, 0.0, kl)  # rounding can dip just below zero
    return float(kl) if kl.ndim == 0 else kl


def dense_forward(x, weights, bias) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ValueError(
            f"dense shape mismatch: x{x.shape} W{weights.shape} b{bias.shape}"
        )
    return x @ weights + bias


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output: (size {size} + 2*{padding} - {kernel}) / {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Columns laid out as (C*K*K, N*H'*W'), one strided copy per kernel offset."""
    n, c, h, w = x.shape
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(w, k, stride, padding)
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def conv2d_forward(x, kernel, bias=None, stride: int = 1, padding: int = 0,
                   return_cols: bool = False):
    """Cross-correlation of x (N,C,H,W) or (C,H,W) with kernel (Cout,Cin,K,K).

    With ``return_cols`` the unrolled input is returned too, for reuse in backward.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {cin}")
    cols, ho, wo = _im2col(x, k, stride, padding)
    y = kernel.reshape(cout, -1) @ cols
    if bias is not None:
        y += bias[:, None]
    y = y.reshape(cout, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    y = y[0] if single else y
    return (y, cols) if return_cols else y


def conv2d_backward(x, kernel, dy, stride: int, padding: int, need_dx: bool = True,
                    cols=None):
    """Gradients (dx, dkernel, dbias) of conv2d_forward; dx is None when not needed."""
    n, c, h, w = x.shape
    cout, cin, k, _ = kernel.shape
    if cols is None:
        cols, ho, wo = _im2col(x, k, stride, padding)
    else:
        ho = conv_output_extent(h, k, stride, padding)
        wo = conv_output_extent(w, k, stride, padding)
    dy2 = dy.transpose(1, 0, 2, 3).reshape(cout, -1)
    dkernel = (dy2 @ cols.T).reshape(kernel.shape)
    dbias = dy2.sum(axis=1)
    if not need_dx:
        return None, dkernel, dbias
    dcols = (kernel.reshape(cout, -1).T @ dy2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, i, j].transpose(1, 0, 2, 3)
            )
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    return dx, dkernel, dbias


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_cell_forward(x, h, c, weights, bias):
    """One LSTM step. weights: (in+hidden, 4*hidden), gate order i, f, g, o."""
    hidden = h.shape[-1]
    if weights.shape != (x.shape[-1] + hidden, 4 * hidden) or c.shape != h.shape:
        raise ValueError(f"lstm shape mismatch: x{x.shape} h{h.shape} W{weights.shape}")
    gates = np.concatenate([x, h], axis=-1) @ weights + bias
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = np.tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:])
    c_next = f * c + i * g
    return o * np.tanh(c_next), c_next


def multi_head_attention_forward(tokens, heads: int, wq, bq, wk, bk, wv, bv, wo, bo):
    """Scaled dot-product self-attention over tokens (..., n, d)."""
    d = tokens.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    lead = tokens.shape[:-2]
    n = tokens.shape[-2]

    def split(t):
        return t.reshape(*lead, n, heads, dh).swapaxes(-2, -3)  # ..., heads, n, dh

    q = split(tokens @ wq + bq)
    k = split(tokens @ wk + bk)
    v = split(tokens @ wv + bv)
    scores = q @ k.swapaxes(-1, -2) / np.sqrt(dh).astype(tokens.dtype)
    scores = scores - scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    mixed = (att @ v).swapaxes(-2, -3).reshape(*lead, n, d)
    return mixed @ wo + bo


def set_max_pool(vectors) -> np.ndarray:
    """Elementwise max over a non-empty sequence of equal-length vectors (axis 0)."""
    arr = np.asarray(vectors)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise ValueError("set_max_pool needs at least one vector")
    return arr.max(axis=0)


def set_max_pool_backward(vectors: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Route dy to the first argmax along axis 0."""
    idx = np.argmax(vectors, axis=0)
    dx = np.zeros_like(vectors, dtype=dy.dtype)
    np.put_along_axis(dx, idx[None], dy[None], axis=0)
    return dx
