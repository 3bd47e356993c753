"""Differentiable volumetric ops on ``(N, C, D, H, W)`` tensors.

Convolutions are lowered to a single GEMM over an im2col buffer. Their
backward passes reuse that buffer, so memory scales with ``k**3`` times the
input size; fine at the patch sizes used here.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_node

NORM_EPS = 1e-5


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation.

    x: (N, Cin, D, H, W); w: (Cout, Cin, k, k, k); b: (Cout,) or None.
    Output spatial size is ``floor((D + 2p - k) / stride) + 1`` per axis.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5D input and weight, got {x.shape} and {w.shape}")
    n, cin, *spatial = x.shape
    cout, wcin, kd, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv3d channel mismatch: input has {cin}, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv3d bias shape {b.shape} does not match {cout} output channels")
    out_sp = [_out_size(s, k, stride, padding) for s, k in zip(spatial, (kd, kh, kw))]
    if min(out_sp) < 1:
        raise ValueError(f"conv3d kernel {w.shape[2:]} too large for input {tuple(spatial)} with padding {padding}")
    do, ho, wo = out_sp
    npix = do * ho * wo
    offsets = [(a, c, e) for a in range(kd) for c in range(kh) for e in range(kw)]

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    padded_shape = xd.shape
    if len(offsets) == 1 and stride == 1:
        cols = xd.reshape(n, cin, npix)
    else:
        # cols[n, ci, t, ...] = receptive-field tap t of every output voxel
        cols = np.empty((n, cin, len(offsets), do, ho, wo), dtype=xd.dtype)
        for t, (a, c, e) in enumerate(offsets):
            cols[:, :, t] = xd[:, :, a : a + stride * do : stride, c : c + stride * ho : stride, e : e + stride * wo : stride]
        cols = cols.reshape(n, cin * len(offsets), npix)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, do, ho, wo)

    def backward(g):
        g3 = g.reshape(n, cout, npix)
        gw = None
        if _wants(w):
            gw = g3[0] @ cols[0].T
            for i in range(1, n):
                gw += g3[i] @ cols[i].T
            gw = gw.reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and _wants(b) else None
        gx = None
        if _wants(x):
            gcols = np.matmul(wmat.T, g3)
            if len(offsets) == 1 and stride == 1:
                gxp = gcols.reshape(padded_shape)
            else:
                gcols = gcols.reshape(n, cin, len(offsets), do, ho, wo)
                gxp = np.zeros(padded_shape, dtype=g.dtype)
                for t, (a, c, e) in enumerate(offsets):
                    gxp[:, :, a : a + stride * do : stride, c : c + stride * ho : stride, e : e + stride * wo : stride] += gcols[:, :, t]
            if padding:
                p = padding
                gxp = gxp[:, :, p:-p, p:-p, p:-p]
            gx = gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def _wants(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to ``stride``.

    x: (N, Cin, D, H, W); w: (Cin, Cout, s, s, s). Output is
    (N, Cout, s*D, s*H, s*W); each input voxel paints one s**3 block.
    This is the adjoint of ``conv3d(., w, stride=s)`` with the same weight.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv_transpose3d expects 5D input and weight, got {x.shape} and {w.shape}")
    n, cin, d, h, wd = x.shape
    wcin, cout, kd, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv_transpose3d channel mismatch: input has {cin}, weight expects {wcin}")
    if (kd, kh, kw) != (stride, stride, stride):
        raise ValueError("conv_transpose3d supports kernel size == stride only")
    s = stride
    xmat = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    wmat = w.data.reshape(cin, -1)
    out = (xmat @ wmat).reshape(n, d, h, wd, cout, s, s, s)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 5, 2, 6, 3, 7)).reshape(n, cout, d * s, h * s, wd * s)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def backward(g):
        gb8 = g.reshape(n, cout, d, s, h, s, wd, s).transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(-1, cout * s**3)
        gx = (gb8 @ wmat.T).reshape(n, d, h, wd, cin).transpose(0, 4, 1, 2, 3) if _wants(x) else None
        gw = (xmat.T @ gb8).reshape(w.shape) if _wants(w) else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if _wants(b) else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def avg_pool3d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Average pooling with a cubic window (no padding)."""
    stride = k if stride is None else stride
    n, c, *spatial = x.shape
    out_sp = [_out_size(s_, k, stride, 0) for s_ in spatial]
    if min(out_sp) < 1:
        raise ValueError(f"avg_pool3d window {k} larger than input {tuple(spatial)}")
    scale = 1.0 / k**3
    if stride == k and all(s_ % k == 0 for s_ in spatial):
        out = x.data.reshape(n, c, out_sp[0], k, out_sp[1], k, out_sp[2], k).mean(axis=(3, 5, 7))

        def backward(g):
            gx = np.broadcast_to(
                (g * scale)[:, :, :, None, :, None, :, None], (n, c, out_sp[0], k, out_sp[1], k, out_sp[2], k)
            )
            return (gx.reshape(x.shape).copy(),)

        return make_node(out, (x,), backward)

    win = sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    win = win[:, :, : out_sp[0], : out_sp[1], : out_sp[2]]
    out = win.mean(axis=(5, 6, 7))

    def backward_general(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        do, ho, wo = out_sp
        for a in range(k):
            for b_ in range(k):
                for e in range(k):
                    gx[:, :, a : a + stride * do : stride, b_ : b_ + stride * ho : stride, e : e + stride * wo : stride] += gs
        return (gx,)

    return make_node(out, (x,), backward_general)


def max_pool3d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    if stride != k:
        raise ValueError("max_pool3d supports stride == k only")
    n, c, *spatial = x.shape
    if any(s_ % k for s_ in spatial):
        raise ValueError(f"max_pool3d needs spatial dims divisible by {k}, got {tuple(spatial)}")
    od, oh, ow = (s_ // k for s_ in spatial)
    blocks = x.data.reshape(n, c, od, k, oh, k, ow, k).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, od, oh, ow, k**3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(n, c, od, oh, ow, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape)
        return (gx,)

    return make_node(out, (x,), backward)


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each (sample, channel) over its spatial extent."""
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_node(xhat.astype(x.dtype, copy=False), (x,), backward)


def softmax_channels(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), backward)


def log_softmax_np(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
