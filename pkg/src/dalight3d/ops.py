"""Differentiable primitives.

Every function takes and returns :class:`~dalight3d.tensor.Tensor` and
records a backward rule on the active tape. Feature maps are laid out as
``[B, C, D, H, W]``. Convolutions are cross-correlations (no kernel flip).
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from .errors import ShapeError
from .tensor import DTYPE, Tensor, record

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


IM2COL_MAX_ELEMENTS = 4_000_000  # float64 elements, ~32 MB


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    if n + 2 * padding < k:
        raise ShapeError(f"extent {n} with padding {padding} is smaller than kernel {k}")
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, d, h, w = x.shape
    out = np.zeros((b, c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p, p:-p] = x
    return out


def _window(xp, offset, out_extents, stride):
    # xp: [..., Dp, Hp, Wp]; returns the strided view feeding kernel tap `offset`
    i, j, l = offset
    do, ho, wo = out_extents
    return xp[..., i:i + stride * (do - 1) + 1:stride,
              j:j + stride * (ho - 1) + 1:stride,
              l:l + stride * (wo - 1) + 1:stride]


# ---------------------------------------------------------------------------
# convolutions


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 3D cross-correlation.

    ``x`` is ``[B, Cin, D, H, W]``, ``w`` is ``[Cout, Cin, kd, kh, kw]``.
    The kernel is applied tap by tap as ``Cout x Cin`` matrix products, so
    memory stays at one shifted copy of the input regardless of kernel size.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape}, {w.shape}")
    B, cin, D, H, W = x.shape
    cout, wcin, kd, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: weight expects {wcin} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv3d: stride must be >= 1 and padding >= 0")
    out_ext = (conv_output_extent(D, kd, stride, padding),
               conv_output_extent(H, kh, stride, padding),
               conv_output_extent(W, kw, stride, padding))
    xp = _pad(x.data, padding).transpose(1, 0, 2, 3, 4)  # [Cin, B, Dp, Hp, Wp]
    n = B * out_ext[0] * out_ext[1] * out_ext[2]
    taps = list(itertools.product(range(kd), range(kh), range(kw)))
    wd = w.data
    wt = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1))  # [kd, kh, kw, Cout, Cin]
    # small inputs: one matmul over stacked taps; large ones: tap by tap
    unrolled = len(taps) * cin * n <= IM2COL_MAX_ELEMENTS
    if unrolled:
        cols = np.stack([_window(xp, t, out_ext, stride).reshape(cin, n) for t in taps]).reshape(-1, n)
        wflat = wt.reshape(len(taps), cout, cin).transpose(1, 0, 2).reshape(cout, -1)
        out = wflat @ cols
    else:
        out = np.zeros((cout, n), dtype=DTYPE)
        for t in taps:
            out += wt[t] @ _window(xp, t, out_ext, stride).reshape(cin, n)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape((cout, B) + out_ext).transpose(1, 0, 2, 3, 4)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, n)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
        if w.requires_grad:
            gw = np.zeros_like(wd)
        if unrolled:
            if w.requires_grad:
                gflat = (g2 @ cols.T).reshape(cout, kd, kh, kw, cin)
                gw = np.ascontiguousarray(gflat.transpose(0, 4, 1, 2, 3))
            if x.requires_grad:
                gcols = (wflat.T @ g2).reshape((len(taps), cin, B) + out_ext)
                for i, t in enumerate(taps):
                    _window(gxp, t, out_ext, stride)[...] += gcols[i]
        else:
            for t in taps:
                if w.requires_grad:
                    cols_t = _window(xp, t, out_ext, stride).reshape(cin, n)
                    gw[:, :, t[0], t[1], t[2]] = g2 @ cols_t.T
                if x.requires_grad:
                    _window(gxp, t, out_ext, stride)[...] += (
                        wt[t].T @ g2).reshape((cin, B) + out_ext)
        if x.requires_grad:
            gxp = gxp.transpose(1, 0, 2, 3, 4)
            p = padding
            gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", inputs, np.ascontiguousarray(out), back)


def depthwise_conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial filtering; ``w`` is ``[C, kd, kh, kw]``, no bias."""
    if x.ndim != 5 or w.ndim != 4:
        raise ShapeError(f"depthwise_conv3d expects [B,C,D,H,W] and [C,k,k,k], got {x.shape}, {w.shape}")
    B, C, D, H, W = x.shape
    if w.shape[0] != C:
        raise ShapeError(f"depthwise_conv3d: weight has {w.shape[0]} channels, input has {C}")
    _, kd, kh, kw = w.shape
    out_ext = (conv_output_extent(D, kd, stride, padding),
               conv_output_extent(H, kh, stride, padding),
               conv_output_extent(W, kw, stride, padding))
    xp = _pad(x.data, padding)
    taps = list(itertools.product(range(kd), range(kh), range(kw)))
    wd = w.data
    out = np.zeros((B, C) + out_ext, dtype=DTYPE)
    for t in taps:
        out += wd[:, t[0], t[1], t[2]][None, :, None, None, None] * _window(xp, t, out_ext, stride)

    def back(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            for t in taps:
                gw[:, t[0], t[1], t[2]] = np.einsum("bcdhw,bcdhw->c", g, _window(xp, t, out_ext, stride))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for t in taps:
                _window(gxp, t, out_ext, stride)[...] += wd[:, t[0], t[1], t[2]][None, :, None, None, None] * g
            p = padding
            gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        return gx, gw

    return record("depthwise_conv3d", (x, w), out, back)


def pointwise_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Channel mixing along axis 1: ``y[b, o, ...] = sum_i w[o, i] x[b, i, ...] + b[o]``.

    Works for any rank >= 2, so it doubles as the dense layer on ``[B, C]``
    vectors and the projection on ``[B, C, D]`` slice descriptors.
    """
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"pointwise_conv3d: bad shapes {x.shape}, {w.shape}")
    cout, cin = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"pointwise_conv3d: weight expects {cin} channels, input has {x.shape[1]}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"pointwise_conv3d: bias shape {b.shape} != ({cout},)")
    B = x.shape[0]
    rest = x.shape[2:]
    x3 = x.data.reshape(B, cin, -1)
    out = w.data @ x3
    if b is not None:
        out += b.data[None, :, None]

    def back(g):
        g3 = g.reshape(B, cout, -1)
        gx = (w.data.T @ g3).reshape(x.shape) if x.requires_grad else None
        gw = (g3 @ x3.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("pointwise_conv3d", inputs, out.reshape((B, cout) + rest), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return pointwise_conv3d(x, w, b)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Kernel-2, stride-2 transposed convolution; ``w`` is ``[Cin, Cout, 2, 2, 2]``.

    Each input voxel scatters into a disjoint 2x2x2 output block, so every
    spatial extent doubles exactly.
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"transposed_conv3d expects [B,Cin,D,H,W] and [Cin,Cout,2,2,2], got {x.shape}, {w.shape}")
    B, cin, D, H, W = x.shape
    if w.shape[0] != cin:
        raise ShapeError(f"transposed_conv3d: weight expects {w.shape[0]} channels, input has {cin}")
    cout = w.shape[1]
    x3 = x.data.reshape(B, cin, -1)
    out = np.empty((B, cout, 2 * D, 2 * H, 2 * W), dtype=DTYPE)
    taps = list(itertools.product(range(2), repeat=3))
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 4, 0, 1))  # [2, 2, 2, Cin, Cout]
    for i, j, l in taps:
        out[:, :, i::2, j::2, l::2] = (wt[i, j, l].T @ x3).reshape(B, cout, D, H, W)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def back(g):
        gx = np.zeros_like(x3) if x.requires_grad else None
        gw = np.empty_like(w.data) if w.requires_grad else None
        for i, j, l in taps:
            gs = g[:, :, i::2, j::2, l::2].reshape(B, cout, -1)
            if gx is not None:
                gx += wt[i, j, l] @ gs
            if gw is not None:
                gw[:, :, i, j, l] = (x3 @ gs.transpose(0, 2, 1)).sum(axis=0)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return (gx.reshape(x.shape) if gx is not None else None), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("transposed_conv3d", inputs, out, back)


# ---------------------------------------------------------------------------
# normalization and nonlinearities


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over ``(C/groups) x spatial`` per sample.

    ``gamma``/``beta`` are per-channel ``[C]``; omit both for the bare
    normalized map.
    """
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {C} channels")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    cshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(cshape)
    if beta is not None:
        out = out + beta.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        gg = gb = gx = None
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta is not None and beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            gh = g * gamma.data.reshape(cshape) if gamma is not None else g
            gh = gh.reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True)
                        - xh * (gh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    inputs = [x]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)

    def back_packed(g):
        gx, gg, gb = back(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gb)
        return res

    return record("group_norm", inputs, out, back_packed)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = ndtr(x.data)
    out = x.data * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", (x,), out, back)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", (x,), y, back)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, back)


def softmax_channel(z: Tensor) -> Tensor:
    """Per-voxel class posterior over axis 1."""
    return softmax(z, axis=1)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; the gradient is zero where clamped."""
    xc = np.maximum(x.data, floor) if floor > 0 else x.data
    out = np.log(xc)

    def back(g):
        gx = g / xc
        if floor > 0:
            gx = np.where(x.data > floor, gx, 0.0)
        return (gx,)

    return record("log", (x,), out, back)


# ---------------------------------------------------------------------------
# pooling and resizing


def pool(x: Tensor, mode: str) -> Tensor:
    """``mean_over_HW``: [B,C,D,H,W] -> [B,C,D]; ``global_mean``: -> [B,C]."""
    if x.ndim != 5:
        raise ShapeError(f"pool expects [B,C,D,H,W], got {x.shape}")
    if mode == "mean_over_HW":
        axes = (3, 4)
    elif mode == "global_mean":
        axes = (2, 3, 4)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def back(g):
        gx = np.broadcast_to(np.expand_dims(g, axes), x.shape) / count
        return (np.array(gx),)

    return record("pool", (x,), out, back)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned linear interpolation along one axis, [n_out, n_in]
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def interpolate_trilinear(x: Tensor, target: Sequence[int]) -> Tensor:
    """Resize the three spatial axes to ``target`` (corner-aligned)."""
    target = tuple(int(t) for t in target)[-3:]
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"interpolate_trilinear: bad target {target}")
    mats = [_interp_matrix(n, t) for n, t in zip(x.shape[2:], target)]
    out = np.einsum("bcdhw,Dd,Hh,Ww->bcDHW", x.data, *mats, optimize=True)

    def back(g):
        return (np.einsum("bcDHW,Dd,Hh,Ww->bcdhw", g, *mats, optimize=True),)

    return record("interpolate_trilinear", (x,), out, back)


# ---------------------------------------------------------------------------
# elementwise, shape and reduction plumbing


def _broadcastable(a_shape, b_shape) -> bool:
    # b of shape [B,C] or [B,C,D] against a full [B,C,D,H,W] map
    return len(b_shape) < len(a_shape) and a_shape[:len(b_shape)] == b_shape and len(a_shape) == 5


def _expand(b: np.ndarray, ndim: int) -> np.ndarray:
    return b.reshape(b.shape + (1,) * (ndim - b.ndim))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Add or multiply; ``b`` may be ``[B,C]`` or ``[B,C,D]`` against a 5-d ``a``."""
    if a.shape == b.shape:
        bd = b.data
        red = None
    elif _broadcastable(a.shape, b.shape):
        bd = _expand(b.data, a.ndim)
        red = tuple(range(b.ndim, a.ndim))
    else:
        raise ShapeError(f"elementwise {kind}: incompatible shapes {a.shape} and {b.shape}")
    if kind == "add":
        out = a.data + bd

        def back(g):
            gb = g.sum(axis=red) if red else g
            return g, gb
    elif kind == "mul":
        out = a.data * bd

        def back(g):
            ga = g * bd if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = g * a.data
                gb = gb.sum(axis=red) if red else gb
            return ga, gb
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return record(f"elementwise_{kind}", (a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes differ {a.shape} vs {b.shape}")
    out = a.data / b.data
    return record("div", (a, b), out, lambda g: (g / b.data, -g * out / b.data))


def affine_scalar(x: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with Python-float constants."""
    return record("affine_scalar", (x,), scale * x.data + shift, lambda g: (scale * g,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single value held in ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale_by needs a single-element scale, got {s.shape}")
    sv = s.data.reshape(())

    def back(g):
        gs = np.sum(g * x.data).reshape(s.shape) if s.requires_grad else None
        return g * sv, gs

    return record("scale_by", (x, s), x.data * sv, back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} does not match {ref} outside axis 1")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return record("concat_channels", tensors, out, back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return record("transpose_last", (x,), np.ascontiguousarray(out), lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape[:-2]} vs {b.shape[:-2]}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, back)


def take_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows of a 2-d table; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.intp)
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return record("take_rows", (table,), out, back)


def take(x: Tensor, index: Sequence[int], axis: int) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        for k, i in enumerate(idx):
            sl[axis] = i
            src = [slice(None)] * x.ndim
            src[axis] = k
            gx[tuple(sl)] += g[tuple(src)]
        return (gx,)

    return record("take", (x,), out, back)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis))
    axes = tuple(range(x.ndim)) if axis is None else tuple(np.atleast_1d(axis) % x.ndim)

    def back(g):
        return (np.array(np.broadcast_to(np.expand_dims(g, axes), x.shape)),)

    return record("sum", (x,), out, back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return affine_scalar(sum(x, axis), 1.0 / n)
