"""Neural-network ops on NCHW tensors, each with an explicit backward."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor, as_tensor, concat, matmul, softmax

GN_EPS = 1e-6


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation via im2col.  ``x``: (N, C, H, W), ``w``: (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b, w.dtype)
    if x.ndim != 4 or w.ndim != 4:
        raise ParameterError("conv2d expects x (N,C,H,W) and w (O,C,kh,kw)")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ParameterError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if stride < 1 or pad < 0:
        raise ParameterError("stride must be >= 1 and pad >= 0")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ParameterError("conv2d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # columns laid out (n, c, kh, kw, ho, wo): every tap is a strided copy and
    # the products below are batched matmuls with no transposes
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                                  j : j + (wo - 1) * stride + 1 : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "conv2d")


def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = GN_EPS) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ParameterError(f"channels {c} not divisible by groups {groups}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gam = scale.data.reshape(1, c, 1, 1)
    out = xhat * gam + shift.data.reshape(1, c, 1, 1)

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = (g * gam).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True)
                        - xh * (gh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, gscale, gshift

    return Tensor.from_op(out, (x, scale, shift), backward, "group_norm")


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ParameterError("upsample factor must be >= 1")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), backward, "nearest_upsample")


def concat_channels(tensors) -> Tensor:
    return concat(tensors, axis=1)


def spatial_mean(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3))


def replicate_global(f: Tensor, height: int, width: int) -> Tensor:
    """(N, C) -> (N, C, H, W); every position is a copy of the vector."""
    n, c = f.shape
    out = np.broadcast_to(f.data[:, :, None, None], (n, c, height, width)).copy()
    return Tensor.from_op(out, (f,), lambda g: (g.sum(axis=(2, 3)),), "replicate_global")


def sample_features(fm: Tensor, operators, out_hw) -> Tensor:
    """Apply one sparse resampling operator per batch item.

    ``fm``: (N, C, H, W); ``operators[i]``: sparse (H_f*W_f, H*W).
    Returns (N, C, H_f, W_f).
    """
    n, c, h, w = fm.shape
    if len(operators) != n:
        raise ParameterError(f"need one operator per batch item ({n}), got {len(operators)}")
    hf, wf = out_hw
    flat = fm.data.reshape(n, c, h * w)
    out = np.empty((n, c, hf * wf), dtype=fm.dtype)
    for i, op in enumerate(operators):
        out[i] = (op @ flat[i].T).T

    def backward(g):
        g = g.reshape(n, c, hf * wf)
        gx = np.empty((n, c, h * w), dtype=g.dtype)
        for i, op in enumerate(operators):
            gx[i] = (op.T @ g[i].T).T
        return (gx.reshape(n, c, h, w),)

    return Tensor.from_op(out.reshape(n, c, hf, wf), (fm,), backward, "sample_features")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return conv2d(x, w, b, stride=1, pad=0)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic (N, HW, HW) weights ``softmax(q^T k / sqrt(C))`` over key positions."""
    n, c, h, w = q.shape
    qf = q.reshape(n, c, h * w).transpose(0, 2, 1)
    kf = k.reshape(n, c, h * w)
    return softmax(matmul(qf, kf) * (1.0 / math.sqrt(c)), axis=-1)


def self_attention(x: Tensor, wq, bq, wk, bk, wv, bv) -> Tensor:
    """Single-head spatial attention with a residual connection."""
    n, c, h, w = x.shape
    q = conv1x1(x, wq, bq)
    k = conv1x1(x, wk, bk)
    v = conv1x1(x, wv, bv)
    attn = attention_weights(q, k)
    vf = v.reshape(n, v.shape[1], h * w)
    out = matmul(vf, attn.transpose(0, 2, 1)).reshape(n, v.shape[1], h, w)
    return x + out


def mse(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
