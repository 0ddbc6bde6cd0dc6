"""Fused differentiable layers: linear maps, normalization, softmax,
multi-head attention and temporal convolution.

Each op computes its forward pass in numpy and registers a hand-written
vector-Jacobian product, which keeps the tape short enough for single-core
training. Leading axes are treated as batch axes throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, record
from .errors import ConfigError, DimensionError, EmptyKeyError


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _mm(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` for a 2-D ``W`` as one GEMM over all leading axes."""
    return (_flat(x) @ W).reshape(*x.shape[:-1], W.shape[1])


def linear(x, W, b) -> Tensor:
    """y = x W + b over the trailing axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0] or W.shape[1:] != b.shape:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}"
        )
    out = _mm(x.data, W.data) + b.data

    def vjp(g):
        gx = _mm(g, W.data.T) if x.requires_grad else None
        g2 = _flat(g)
        gW = _flat(x.data).T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return record(out, (x, W, b), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _softmax(x.data, axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), vjp)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _flat(g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = _flat(g).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return record(out, (x, gamma, beta), vjp)


@dataclass
class AttentionParams:
    num_heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _attention_core(Q, K, V, p: AttentionParams):
    h = p.num_heads
    q = _split_heads(_mm(Q, p.wq.data) + p.bq.data, h)
    k = _split_heads(_mm(K, p.wk.data) + p.bk.data, h)
    v = _split_heads(_mm(V, p.wv.data) + p.bv.data, h)
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = _softmax((q @ np.swapaxes(k, -1, -2)) * scale, -1)
    return q, k, v, attn, scale


def _check_attention(Q: Tensor, K: Tensor, V: Tensor, p: AttentionParams) -> None:
    d = p.dim
    if p.num_heads < 1 or d % p.num_heads:
        raise ConfigError(f"model dim {d} not divisible by num_heads={p.num_heads}")
    if K.shape[-2] == 0:
        raise EmptyKeyError("multi_head_attention: key set is empty")
    if Q.shape[-1] != d or K.shape[-1] != d or V.shape[-1] != d:
        raise DimensionError(
            f"multi_head_attention: Q {Q.shape}, K {K.shape}, V {V.shape} vs model dim {d}"
        )
    if K.shape[:-1] != V.shape[:-1]:
        raise DimensionError(f"multi_head_attention: K {K.shape} and V {V.shape} differ")


def attention_weights(Q, K, p: AttentionParams) -> np.ndarray:
    """Per-head attention probabilities, shape ``[..., heads, Nq, Nk]``."""
    Q, K = as_tensor(Q), as_tensor(K)
    _check_attention(Q, K, K, p)
    return _attention_core(Q.data, K.data, K.data, p)[3]


def multi_head_attention(Q, K, V, p: AttentionParams) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated then projected."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_attention(Q, K, V, p)
    q, k, v, attn, scale = _attention_core(Q.data, K.data, V.data, p)
    o = _merge_heads(attn @ v)
    out = _mm(o, p.wo.data) + p.bo.data
    h = p.num_heads

    def vjp(g):
        g2 = _flat(g)
        g_wo = _flat(o).T @ g2
        g_bo = g2.sum(axis=0)
        go = _split_heads(_mm(g, p.wo.data.T), h)
        g_attn = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(attn, -1, -2) @ go
        gs = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True)) * scale
        gq = _merge_heads(gs @ k)
        gk = _merge_heads(np.swapaxes(gs, -1, -2) @ q)
        gv = _merge_heads(gv)
        return (
            _mm(gq, p.wq.data.T),
            _mm(gk, p.wk.data.T),
            _mm(gv, p.wv.data.T),
            _flat(Q.data).T @ _flat(gq),
            _flat(gq).sum(axis=0),
            _flat(K.data).T @ _flat(gk),
            _flat(gk).sum(axis=0),
            _flat(V.data).T @ _flat(gv),
            _flat(gv).sum(axis=0),
            g_wo,
            g_bo,
        )

    return record(out, (Q, K, V, *p.tensors()), vjp)


def temporal_conv1d(x, kernel, bias) -> Tensor:
    """Same-length 1-D convolution along axis -2 with zero padding.

    ``x`` is ``[..., T, D_in]``, ``kernel`` is ``[k, D_in, D_out]`` with odd
    ``k``; ``y[t] = sum_j x[t + j - (k-1)/2] @ kernel[j] + bias``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"temporal_conv1d needs an odd kernel size, got {k}")
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise DimensionError(
            f"temporal_conv1d: input {x.shape} vs kernel {kernel.shape} / bias {bias.shape}"
        )
    T = x.shape[-2]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    cols = np.stack([xp[..., j : j + T, :] for j in range(k)], axis=-2)
    cols = cols.reshape(*x.shape[:-1], k * d_in)
    kmat = kernel.data.reshape(k * d_in, d_out)
    out = cols @ kmat + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gcols = (g @ kmat.T).reshape(*x.shape[:-1], k, d_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + T, :] += gcols[..., j, :]
            gx = gxp[..., pad : pad + T, :]
        g2 = _flat(g)
        gk = (_flat(cols).T @ g2).reshape(k, d_in, d_out) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gk, gb

    return record(out, (x, kernel, bias), vjp)
