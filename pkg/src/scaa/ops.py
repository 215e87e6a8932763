"""Differentiable primitives.

Every function takes and returns :class:`~scaa.tensor.Tensor`. Elementwise
binary ops require equal shapes; the only implicit broadcast is against a
Python scalar (or a one-element tensor), which keeps contractions explicit.

Spatial ops accept an optional leading batch axis: ``conv2d`` works on
``[C, H, W]`` or ``[N, C, H, W]`` and ``conv3d`` on ``[C, D, H, W]`` or
``[N, C, D, H, W]``.
"""

from __future__ import annotations

import math
import string
from functools import lru_cache
from itertools import product
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, grad_enabled, make_result

__all__ = [
    "add", "sub", "mul", "div", "sum", "mean", "reshape", "flatten", "concat",
    "expand", "relu", "sigmoid", "softmax", "conv2d", "conv3d", "maxpool",
    "instance_norm", "adaptive_avg_pool", "avg_pool", "upsample2x", "upsample",
    "contract",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------

def _is_scalar(x) -> bool:
    return np.isscalar(x) or (isinstance(x, Tensor) and x.size == 1 and x.ndim == 0)


def _binary_operands(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
            raise ShapeError(f"elementwise op on shapes {a.shape} and {b.shape}; "
                             "only scalar broadcasting is allowed")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "div", (a, b), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), "sum", (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), "mean", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, "reshape", (x,), backward)


def flatten(x: Tensor, start: int = 0) -> Tensor:
    """Collapse axes ``start..`` into one."""
    return reshape(x, x.shape[:start] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: {ref.shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(out, "concat", tensors, backward)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape``."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return (g.sum(axis=axes, keepdims=True),)

    return make_result(out, "expand", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so tiny outputs keep full relative precision
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out.astype(x.dtype, copy=False), "sigmoid", (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * n


def _conv(x: Tensor, w: Tensor, b, stride, pad, dims: int, name: str) -> Tensor:
    batched = x.ndim == dims + 2
    if x.ndim not in (dims + 1, dims + 2):
        raise ShapeError(f"{name}: expected input with {dims + 1} or {dims + 2} axes, got {x.shape}")
    if w.ndim != dims + 2:
        raise ShapeError(f"{name}: weight must have {dims + 2} axes, got {w.shape}")
    xd = x.data if batched else x.data[None]
    n, cin = xd.shape[:2]
    cout, wcin = w.shape[:2]
    if wcin != cin:
        raise ShapeError(f"{name}: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{name}: bias shape {b.shape} != ({cout},)")
    k = w.shape[2:]
    s = _tuple(stride, dims)
    p = _tuple(pad, dims)
    if min(s) < 1:
        raise ValueError(f"{name}: stride must be >= 1")
    spatial = xd.shape[2:]
    out_sp = tuple((spatial[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(dims))
    if any(spatial[i] + 2 * p[i] < k[i] for i in range(dims)):
        raise ShapeError(f"{name}: kernel {k} does not fit padded input {spatial} (pad {p})")

    pointwise = all(kk == 1 for kk in k) and all(pp == 0 for pp in p) and all(ss == 1 for ss in s)
    wmat = w.data.reshape(cout, -1)
    if pointwise:
        cols = np.moveaxis(xd, 1, -1).reshape(-1, cin)
    else:
        xp = np.pad(xd, [(0, 0), (0, 0)] + [(pp, pp) for pp in p]) if any(p) else xd
        win = sliding_window_view(xp, k, axis=tuple(range(2, 2 + dims)))
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, ss) for ss in s)]
        win = win[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)]
        # [N, *out, C, *K] -> im2col matrix
        perm = (0,) + tuple(range(2, 2 + dims)) + (1,) + tuple(range(2 + dims, 2 + 2 * dims))
        cols = win.transpose(perm).reshape(-1, cin * int(np.prod(k)))
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.moveaxis(out.reshape((n,) + out_sp + (cout,)), -1, 1)
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    keep_cols = grad_enabled() and (w.requires_grad or x.requires_grad or (b is not None and b.requires_grad))
    if not keep_cols:
        cols = None

    def backward(g):
        gd = g if batched else g[None]
        g2 = np.moveaxis(gd, 1, -1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if pointwise:
                gx = np.moveaxis(gcols.reshape((n,) + spatial + (cin,)), -1, 1)
            else:
                gc = gcols.reshape((n,) + out_sp + (cin,) + k)
                # [*K, N, C, *out] so each kernel offset is a contiguous slab
                perm = tuple(range(2 + dims, 2 + 2 * dims)) + (0, 1 + dims) + tuple(range(1, 1 + dims))
                gc = np.ascontiguousarray(gc.transpose(perm))
                padded = tuple(spatial[i] + 2 * p[i] for i in range(dims))
                gxp = np.zeros((n, cin) + padded, dtype=gd.dtype)
                for off in product(*(range(kk) for kk in k)):
                    sl = tuple(slice(off[i], off[i] + s[i] * (out_sp[i] - 1) + 1, s[i]) for i in range(dims))
                    gxp[(slice(None), slice(None)) + sl] += gc[off]
                gx = gxp[(slice(None), slice(None)) + tuple(slice(pp, pp + sp) for pp, sp in zip(p, spatial))]
            gx = np.ascontiguousarray(gx if batched else gx[0])
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, name, inputs, backward)


def conv2d(x: Tensor, w: Tensor, b=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` ([N,]C,H,W) with ``w`` (O,C,kh,kw)."""
    return _conv(x, w, b, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` ([N,]C,D,H,W) with ``w`` (O,C,kd,kh,kw)."""
    return _conv(x, w, b, stride, pad, 3, "conv3d")


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def maxpool(x: Tensor, window: int = 2, dims: int = 2) -> Tensor:
    """Non-overlapping max pooling over the trailing ``dims`` axes.

    Extents must be divisible by ``window``. Backward routes the gradient to
    the first maximal element of each window.
    """
    lead = x.shape[: x.ndim - dims]
    sp = x.shape[x.ndim - dims:]
    if any(s % window for s in sp):
        raise ShapeError(f"maxpool: extents {sp} not divisible by window {window}")
    out_sp = tuple(s // window for s in sp)
    split = lead + tuple(v for o in out_sp for v in (o, window))
    nl = len(lead)
    # [..., o1, w, o2, w] -> [..., o1, o2, w, w]
    perm = tuple(range(nl)) + tuple(nl + 2 * i for i in range(dims)) + tuple(nl + 2 * i + 1 for i in range(dims))
    blocks = x.data.reshape(split).transpose(perm).reshape(lead + out_sp + (window ** dims,))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(lead + out_sp + (window,) * dims).transpose(inv)
        return (gb.reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), "maxpool", (x,), backward)


@lru_cache(maxsize=256)
def _adaptive_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype_str)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)  # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


@lru_cache(maxsize=256)
def _linear_up_matrix(n_in: int, dtype_str: str) -> np.ndarray:
    # half-pixel centres, edge clamped (align_corners=False)
    n_out = 2 * n_in
    m = np.zeros((n_out, n_in), dtype=dtype_str)
    for j in range(n_out):
        src = min(max((j + 0.5) / 2.0 - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[j, i0] += 1.0 - frac
        m[j, i1] += frac
    return m


def _apply_axis_matrices(x: Tensor, mats: dict, name: str) -> Tensor:
    """Apply ``mats[axis]`` (out x in) along each listed axis; separable linear map."""
    data = x.data
    for ax, m in mats.items():
        data = np.moveaxis(np.tensordot(m, data, axes=([1], [ax])), 0, ax)
    out = np.ascontiguousarray(data)

    def backward(g):
        for ax, m in mats.items():
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [ax])), 0, ax)
        return (np.ascontiguousarray(g),)

    return make_result(out, name, (x,), backward)


def adaptive_avg_pool(x: Tensor, target: Sequence[int]) -> Tensor:
    """Average-pool the trailing ``len(target)`` axes to extents ``target``.

    Bin ``i`` of an axis of length ``n`` covers ``[floor(i*n/t), ceil((i+1)*n/t))``.
    """
    target = tuple(int(t) for t in target)
    nd = len(target)
    sp = x.shape[x.ndim - nd:]
    if any(t > s for t, s in zip(target, sp)):
        raise ShapeError(f"adaptive_avg_pool: target {target} exceeds input {sp}")
    if any(t < 1 for t in target):
        raise ShapeError(f"adaptive_avg_pool: target {target} must be positive")
    dt = x.dtype.str
    mats = {x.ndim - nd + i: _adaptive_matrix(sp[i], target[i], dt) for i in range(nd) if sp[i] != target[i]}
    if not mats:
        return reshape(x, x.shape)
    return _apply_axis_matrices(x, mats, "adaptive_avg_pool")


def avg_pool(x: Tensor, window: int = 2, dims: int = 3) -> Tensor:
    """Non-overlapping mean pooling (equals trilinear/bilinear x1/2 resampling)."""
    sp = x.shape[x.ndim - dims:]
    if any(s % window for s in sp):
        raise ShapeError(f"avg_pool: extents {sp} not divisible by window {window}")
    return adaptive_avg_pool(x, [s // window for s in sp])


def upsample2x(x: Tensor, mode: str = "nearest", dims: int = 2) -> Tensor:
    """Double the trailing ``dims`` axes.

    ``nearest`` repeats values; ``bilinear``/``trilinear``/``linear`` use
    half-pixel linear interpolation with clamped edges.
    """
    axes = tuple(range(x.ndim - dims, x.ndim))
    if mode == "nearest":
        out = x.data
        for ax in axes:
            out = np.repeat(out, 2, axis=ax)
        lead = x.shape[: x.ndim - dims]
        split = lead + tuple(v for s in x.shape[x.ndim - dims:] for v in (s, 2))
        sum_axes = tuple(len(lead) + 2 * i + 1 for i in range(dims))

        def backward(g):
            return (g.reshape(split).sum(axis=sum_axes),)

        return make_result(np.ascontiguousarray(out), "upsample_nearest", (x,), backward)
    if mode in ("bilinear", "trilinear", "linear"):
        dt = x.dtype.str
        mats = {ax: _linear_up_matrix(x.shape[ax], dt) for ax in axes}
        return _apply_axis_matrices(x, mats, f"upsample_{mode}")
    raise ValueError(f"unknown upsample mode {mode!r}")


def upsample(x: Tensor, factor: int, mode: str = "nearest", dims: int = 2) -> Tensor:
    """Upsample by a power-of-two ``factor`` via repeated doubling."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    while factor > 1:
        x = upsample2x(x, mode, dims)
        factor //= 2
    return x


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, spatial_dims: int = 2) -> Tensor:
    """Normalize each channel over its trailing ``spatial_dims`` axes, then scale/shift.

    The channel axis is the one just before the spatial axes; any axes before
    it (a batch axis) are treated independently.
    """
    c_axis = x.ndim - spatial_dims - 1
    if c_axis < 0:
        raise ShapeError(f"instance_norm: input {x.shape} lacks a channel axis")
    c = x.shape[c_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    axes = tuple(range(c_axis + 1, x.ndim))
    m = int(np.prod(x.shape[c_axis + 1:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = (c,) + (1,) * spatial_dims
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = tuple(range(c_axis)) + axes

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            gx = inv / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), "instance_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# index contraction
# ---------------------------------------------------------------------------

def _parse_spec(spec: str, a: Tensor, b: Tensor):
    try:
        lhs, out = spec.replace(" ", "").split("->")
        ia, ib = lhs.split(",")
    except ValueError:
        raise ValueError(f"contract spec must look like 'ab,bc->ac', got {spec!r}") from None
    for name, idx, t in (("first", ia, a), ("second", ib, b)):
        if len(idx) != t.ndim:
            raise ShapeError(f"contract: {name} operand has {t.ndim} axes but spec gives {idx!r}")
        if len(set(idx)) != len(idx):
            raise ValueError(f"contract: repeated index within one operand ({idx!r})")
        if not set(idx) <= set(string.ascii_letters):
            raise ValueError(f"contract: indices must be letters, got {idx!r}")
    if set(out) - set(ia) - set(ib) or len(set(out)) != len(out):
        raise ValueError(f"contract: bad output indices {out!r}")
    extents = {}
    for idx, t in ((ia, a), (ib, b)):
        for ch, n in zip(idx, t.shape):
            if extents.setdefault(ch, n) != n:
                raise ShapeError(f"contract: index {ch!r} has extent {extents[ch]} and {n}")
    return ia, ib, out, extents


def _einsum_grad(g, other, g_idx, o_idx, target_idx, extents):
    # indices that appear only in the target operand are summed over in the
    # forward pass, so their gradient is a broadcast along them
    avail = set(g_idx) | set(o_idx)
    present = "".join(c for c in target_idx if c in avail)
    r = np.einsum(f"{g_idx},{o_idx}->{present}", g, other, optimize=True)
    if present != target_idx:
        for pos, c in enumerate(target_idx):
            if c not in avail:
                r = np.expand_dims(r, pos)
        r = np.broadcast_to(r, tuple(extents[c] for c in target_idx)).copy()
    return r


def contract(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Einstein-summation contraction of two tensors, e.g. ``'cdhw,d->chw'``."""
    a, b = as_tensor(a), as_tensor(b)
    ia, ib, out_idx, extents = _parse_spec(spec, a, b)
    out = np.einsum(f"{ia},{ib}->{out_idx}", a.data, b.data, optimize=True)
    out = np.ascontiguousarray(np.asarray(out, dtype=np.result_type(a.dtype, b.dtype)))

    def backward(g):
        ga = _einsum_grad(g, b.data, out_idx, ib, ia, extents) if a.requires_grad else None
        gb = _einsum_grad(g, a.data, out_idx, ia, ib, extents) if b.requires_grad else None
        return ga, gb

    return make_result(out, "contract", (a, b), backward)
