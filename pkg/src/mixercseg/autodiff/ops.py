"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects. Backward closures
return one gradient array per parent (``None`` for non-differentiable inputs).
Elementwise operations follow numpy broadcasting; gradients are summed back
to each operand's shape.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigError, ShapeError
from .decisions import decide
from .tensor import Tensor, is_grad_enabled

Number = Union[int, float]


def _make(out: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(out)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return _make(xd * s, (x,), backward, "silu")


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)`` evaluated as ``logaddexp(0, x)`` (no overflow for large ``|x|``)."""
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = decide(lambda: xd > 0)
    return _make(xd * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    scale = 1.0 / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor, start: int = 0) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {err}") from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes))
        )

    return _make(out, tuple(tensors), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward, "narrow")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to extent {x.shape[axis]}")
    parts, start = [], 0
    for n in sizes:
        parts.append(narrow(x, axis, start, n))
        start += n
    return parts


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` at integer positions along ``axis``."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise IndexError(f"take: index out of range for extent {x.shape[axis]}")
    shape = x.shape

    def backward(g):
        full = np.zeros((shape[axis],) + shape[:axis] + shape[axis + 1:], dtype=g.dtype)
        np.add.at(full, index, np.moveaxis(g, axis, 0))
        return (np.moveaxis(full, 0, axis),)

    return _make(np.take(x.data, index, axis=axis), (x,), backward, "take")


def gather2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., rows[i], cols[j]]`` (reflection padding, cropping)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape
    ri, ci = rows[:, None], cols[None, :]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        lead = full.reshape((-1,) + shape[-2:])
        g3 = g.reshape((-1,) + g.shape[-2:])
        for k in range(lead.shape[0]):
            np.add.at(lead[k], (ri, ci), g3[k])
        return (full,)

    return _make(x.data[..., ri, ci], (x,), backward, "gather2d")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _pair(v, name) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError(f"{name} must be an int or a pair, got {v!r}")
        pair = (int(v[0]), int(v[1]))
    else:
        pair = (int(v), int(v))
    return pair


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``[C, H, W]`` or ``[N, C, H, W]`` input.

    ``weight`` has shape ``[C_out, C_in / groups, kh, kw]``. Zero padding.
    """
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ConfigError(f"padding must be >= 0, got {(ph, pw)}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects [C,H,W] or [N,C,H,W], got {x.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = weight.data
    n, c, h, w = xd.shape
    o, cg, kh, kw = wd.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide C_in={c} and C_out={o}")
    if cg * groups != c:
        raise ShapeError(f"conv2d: weight {wd.shape} expects {cg * groups} input channels, got {c}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho, wo = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)

    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0 and groups == 1
    depthwise = groups == c and o == c and cg == 1
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = None

    if pointwise:
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, xd.reshape(n, c, h * w)).reshape(n, o, h, w)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        if groups == 1:
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
            out = (cols @ wd.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        elif depthwise:
            out = np.einsum("nchwij,cij->nchw", win, wd[:, 0])
        else:
            wing = win.reshape(n, groups, cg, ho, wo, kh, kw)
            out = np.einsum("ngchwij,gocij->ngohw", wing, wd.reshape(groups, o // groups, cg, kh, kw),
                            optimize=True).reshape(n, o, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def col2im(gwin):
        # gwin: [n, c, ho, wo, kh, kw] -> gradient of the padded input
        gxp = np.zeros(xp.shape, dtype=gwin.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gwin[..., i, j]
        return gxp[:, :, ph:ph + h, pw:pw + w]

    def backward(g):
        g4 = g[None] if squeeze else g
        if pointwise:
            gflat = g4.reshape(n, o, h * w)
            gw = np.einsum("nop,ncp->oc", gflat, xd.reshape(n, c, h * w)).reshape(wd.shape)
            gx = np.matmul(wd.reshape(o, c).T, gflat).reshape(n, c, h, w)
        elif groups == 1:
            gflat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            gw = (gflat.T @ cols).reshape(wd.shape)
            gcols = (gflat @ wd.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
            gx = col2im(gcols.transpose(0, 3, 1, 2, 4, 5))
        elif depthwise:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
            gw = np.einsum("nchwij,nchw->cij", win, g4)[:, None]
            gxp = np.zeros(xp.shape, dtype=g4.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += (
                        g4 * wd[:, 0, i, j][None, :, None, None]
                    )
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        else:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
            wing = win.reshape(n, groups, cg, ho, wo, kh, kw)
            gg = g4.reshape(n, groups, o // groups, ho, wo)
            wg = wd.reshape(groups, o // groups, cg, kh, kw)
            gw = np.einsum("ngchwij,ngohw->gocij", wing, gg, optimize=True).reshape(wd.shape)
            gwin = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(n, c, ho, wo, kh, kw)
            gx = col2im(gwin)
        gx = gx[0] if squeeze else gx
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    if squeeze:
        out = out[0]
    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def causal_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depth-wise causal convolution over a ``[L, d]`` sequence.

    ``weight`` is ``[d, K]``; the sequence is left-padded with ``K - 1`` zeros
    so ``out[t]`` only sees ``x[t-K+1 .. t]``.
    """
    xd, wd = x.data, weight.data
    length, d = xd.shape
    if wd.shape[0] != d:
        raise ShapeError(f"causal_conv1d: weight {wd.shape} does not match {d} channels")
    k = wd.shape[1]
    xp = np.concatenate([np.zeros((k - 1, d), dtype=xd.dtype), xd], axis=0)
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[j:j + length] * wd[:, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[j:j + length] += g * wd[:, j]
            gw[:, j] = np.sum(g * xp[j:j + length], axis=0)
        grads = [gxp[k - 1:], gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "causal_conv1d")


def _pool_windows(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    return sliding_window_view(xp, (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max over ``kernel x kernel`` windows of the last two axes; ties go to the first index."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"maxpool2d: kernel {kernel} larger than padded input {(h, w)}")
    pad = [(0, 0)] * (xd.ndim - 2) + [(padding, padding)] * 2
    xp = np.pad(xd, pad, constant_values=-np.inf) if padding else xd
    win = _pool_windows(xp, kernel, stride)
    ho, wo = win.shape[-4], win.shape[-3]
    flat = win.reshape(win.shape[:-2] + (kernel * kernel,))
    idx = decide(lambda: np.argmax(flat, axis=-1))
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = idx == i * kernel + j
                gxp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * hit
        return (gxp[..., padding:padding + h, padding:padding + w],)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def avgpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Mean over windows with zero padding counted in the denominator."""
    xd = x.data
    h, w = xd.shape[-2:]
    pad = [(0, 0)] * (xd.ndim - 2) + [(padding, padding)] * 2
    xp = np.pad(xd, pad) if padding else xd
    win = _pool_windows(xp, kernel, stride)
    ho, wo = win.shape[-4], win.shape[-3]
    scale = 1.0 / (kernel * kernel)
    out = win.sum(axis=(-2, -1)) * scale

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gxp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
        return (gxp[..., padding:padding + h, padding:padding + w],)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "avgpool2d")


def adaptive_avgpool(x: Tensor) -> Tensor:
    """Average over the last two (spatial) axes, keeping them as size 1."""
    return mean(x, axis=(-2, -1), keepdims=True)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights ``[n_out, n_in]`` with half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    oh, ow = int(size[0]), int(size[1])
    if oh < h or ow < w:
        raise ConfigError(f"upsample_bilinear cannot downscale {(h, w)} to {(oh, ow)}")
    if (oh, ow) == (h, w):
        return x
    ry = bilinear_matrix(h, oh, x.dtype)
    rx = bilinear_matrix(w, ow, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _make(out, (x,), backward, "upsample_bilinear")


# ---------------------------------------------------------------------------
# normalisation, attention, losses
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, weight: Optional[Tensor], bias: Optional[Tensor], axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalise over one axis, then rescale per entry of that axis."""
    xd = x.data
    axis = axis % xd.ndim
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * xd.ndim
    bshape[axis] = xd.shape[axis]
    wb = weight.data.reshape(bshape) if weight is not None else None
    out = xhat * wb if wb is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    other = tuple(i for i in range(xd.ndim) if i != axis)

    def backward(g):
        gh = g * wb if wb is not None else g
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return tuple(grads)

    parents = tuple(t for t in (x, weight, bias) if t is not None)
    return _make(out, parents, backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for any magnitude."""
    xd = logits.data
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=xd.dtype)
    if y.shape != xd.shape:
        raise ShapeError(f"bce_with_logits: logits {xd.shape} vs target {y.shape}")
    per = np.maximum(xd, 0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    scale = 1.0 / xd.size

    def backward(g):
        return (g * (_sigmoid(xd) - y) * scale,)

    return _make(np.asarray(per.mean(), dtype=xd.dtype), (logits,), backward, "bce_with_logits")
