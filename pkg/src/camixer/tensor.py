"""Dense tensors with reverse-mode automatic differentiation.

Every op works on ``numpy`` arrays and, when any input participates in the
tape, records a closure mapping the output gradient to input gradients.
Only the operators the CAMixer pipeline needs are provided.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from camixer import macs


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised in anomaly mode when an op produces NaN or Inf."""


class _State(threading.local):
    # per-thread so worker pools can run under no_grad independently
    dtype = np.float32
    grad_enabled = True
    anomaly = False


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new leaf tensors."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NonFiniteError` as soon as an op yields NaN/Inf."""
    prev = _state.anomaly
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if _state.anomaly and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {backward.__qualname__}")
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every tape tensor reachable from ``self``.

        Gradients accumulate across calls; clear them with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))


class Parameter(Tensor):
    """A leaf tensor that is trained by the optimizer."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _paired(a, b) -> tuple[Tensor, Tensor | float]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.data.dtype)
    if isinstance(b, np.ndarray) and b.ndim:
        b = Tensor(b, dtype=a.data.dtype)
    return a, b


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _paired(a, b)
    if not isinstance(b, Tensor):
        return Tensor._result(a.data + b, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _paired(a, b)
    if not isinstance(b, Tensor):
        return Tensor._result(a.data - b, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _paired(a, b)
    if not isinstance(b, Tensor):
        return Tensor._result(a.data * b, (a,), lambda g: (g * b,))
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _paired(a, b)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return Tensor._result(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return Tensor._result(x * cdf, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# -- reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    shape, dt = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        return (full,)

    return Tensor._result(a.data[key], (a,), backward)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    macs.record(int(np.prod(batch)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise DimensionError(
            f"conv2d channel/group mismatch: input {x.shape}, weight {weight.shape}, groups={groups}"
        )
    k = kh
    p = k // 2 if padding is None else padding
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    macs.record(B * cout * cin_g * k * k * Ho * Wo)
    depthwise = groups == cin and cin_g == 1 and cout == cin
    span_h = stride * (Ho - 1) + 1
    span_w = stride * (Wo - 1) + 1

    def window(arr, i, j):
        return arr[:, :, i : i + span_h : stride, j : j + span_w : stride]

    if groups == 1 and k == 1 and stride == 1 and p == 0:
        wmat = wd.reshape(cout, cin)
        xm = xd.reshape(B, cin, H * W)
        out = np.matmul(wmat, xm).reshape(B, cout, H, W)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward_1x1(g):
            gm = g.reshape(B, cout, H * W)
            gx = np.matmul(wmat.T, gm).reshape(xd.shape) if x.requires_grad else None
            gw = np.tensordot(gm, xm, axes=([0, 2], [0, 2])).reshape(wd.shape) if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

        parents = (x, weight) if bias is None else (x, weight, bias)
        return Tensor._result(out, parents, backward_1x1)

    if groups == 1 and not depthwise:
        # im2col: one GEMM over (Cin*k*k) patches
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, cin * k * k)
        wmat = wd.reshape(cout, cin * k * k)
        out = np.matmul(cols, wmat.T).transpose(0, 2, 1).reshape(B, cout, Ho, Wo)
    else:
        cols = None
        out = np.zeros((B, cout, Ho, Wo), dtype=np.result_type(xd, wd))
        for i in range(k):
            for j in range(k):
                xs = window(xp, i, j)
                if depthwise:
                    out += xs * wd[:, 0, i, j][None, :, None, None]
                else:
                    wg = wd[:, :, i, j].reshape(groups, cout // groups, cin_g)
                    xg = xs.reshape(B, groups, cin_g, Ho * Wo)
                    out += np.matmul(wg[None], xg).reshape(B, cout, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if cols is not None:
            gm = g.reshape(B, cout, Ho * Wo)
            if weight.requires_grad:
                gw = np.tensordot(gm, cols, axes=([0, 2], [0, 1])).reshape(wd.shape)
            if x.requires_grad:
                gcols = np.matmul(gm.transpose(0, 2, 1), wmat).reshape(B, Ho, Wo, cin, k, k)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        window(gxp, i, j)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        else:
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dst = window(gxp, i, j)
                        if depthwise:
                            dst += g * wd[:, 0, i, j][None, :, None, None]
                        else:
                            wg = wd[:, :, i, j].reshape(groups, cout // groups, cin_g)
                            gg = g.reshape(B, groups, cout // groups, Ho * Wo)
                            dst += np.matmul(np.swapaxes(wg, 1, 2)[None], gg).reshape(B, cin, Ho, Wo)
                gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
            if weight.requires_grad:
                gw = np.empty_like(wd)
                for i in range(k):
                    for j in range(k):
                        xs = window(xp, i, j)
                        if depthwise:
                            gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xs)
                        else:
                            gg = g.reshape(B, groups, cout // groups, Ho * Wo)
                            xg = xs.reshape(B, groups, cin_g, Ho * Wo)
                            gw[:, :, i, j] = np.einsum("bgop,bgip->goi", gg, xg).reshape(cout, cin_g)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward)


# -- normalisation / attention primitives ------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Normalise over ``axis`` then apply a per-channel affine map."""
    xd = x.data
    axis = axis % xd.ndim
    bshape = [1] * xd.ndim
    bshape[axis] = xd.shape[axis]
    gd, sd = gain.data.reshape(bshape), shift.data.reshape(bshape)
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    red = tuple(i for i in range(xd.ndim) if i != axis)

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        gg = (g * xhat).sum(axis=red).reshape(gain.shape) if gain.requires_grad else None
        gs = g.sum(axis=red).reshape(shift.shape) if shift.requires_grad else None
        return gx, gg, gs

    return Tensor._result(xhat * gd + sd, (x, gain, shift), backward)


def grid_sample_bilinear(x: Tensor, offsets: Tensor) -> Tensor:
    """Warp ``x`` by per-pixel displacements with border clamping.

    ``offsets[:, 0]`` is the horizontal (x) shift and ``offsets[:, 1]`` the
    vertical (y) shift, both in pixels. Pixel (i, j) samples ``x`` at
    ``(i + dy, j + dx)`` clamped into the image.
    """
    B, C, H, W = x.shape
    if offsets.shape != (B, 2, H, W):
        raise DimensionError(f"offsets must have shape {(B, 2, H, W)}, got {offsets.shape}")
    xd, od = x.data, offsets.data
    ii = np.arange(H, dtype=od.dtype)[None, :, None]
    jj = np.arange(W, dtype=od.dtype)[None, None, :]
    py_raw = ii + od[:, 1]
    px_raw = jj + od[:, 0]
    # non-finite coordinates sample pixel 0 for indexing, then poison the output
    bad = ~(np.isfinite(py_raw) & np.isfinite(px_raw))
    py = np.clip(np.where(bad, 0, py_raw), 0, H - 1)
    px = np.clip(np.where(bad, 0, px_raw), 0, W - 1)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (py - y0).astype(xd.dtype)
    wx = (px - x0).astype(xd.dtype)

    flat = xd.reshape(B, C, H * W)

    def take(yy, xx):
        idx = (yy * W + xx).reshape(B, 1, H * W)
        return np.take_along_axis(flat, np.broadcast_to(idx, (B, C, H * W)), axis=2).reshape(B, C, H, W)

    v00, v01, v10, v11 = take(y0, x0), take(y0, x1), take(y1, x0), take(y1, x1)
    wy_, wx_ = wy[:, None], wx[:, None]
    top = v00 + wx_ * (v01 - v00)
    bot = v10 + wx_ * (v11 - v10)
    out = top + wy_ * (bot - top)
    if bad.any():
        out = np.where(bad[:, None], np.nan, out).astype(xd.dtype)

    def backward(g):
        gx = go = None
        if x.requires_grad:
            base = (np.arange(B * C) * (H * W)).reshape(B, C, 1)
            acc = np.zeros(B * C * H * W, dtype=np.float64)
            for yy, xx, w in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x1, (1 - wy) * wx),
                (y1, x0, wy * (1 - wx)),
                (y1, x1, wy * wx),
            ):
                idx = (base + (yy * W + xx).reshape(B, 1, H * W)).ravel()
                acc += np.bincount(idx, weights=(g * w[:, None]).ravel(), minlength=acc.size)
            gx = acc.reshape(B, C, H, W).astype(xd.dtype)
        if offsets.requires_grad:
            d_dx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
            d_dy = bot - top
            in_x = (px_raw > 0) & (px_raw < W - 1)
            in_y = (py_raw > 0) & (py_raw < H - 1)
            go = np.stack([(g * d_dx).sum(axis=1) * in_x, (g * d_dy).sum(axis=1) * in_y], axis=1)
            go = go.astype(od.dtype)
        return gx, go

    return Tensor._result(out, (x, offsets), backward)


def pad_reflect(x: Tensor, bottom: int, right: int) -> Tensor:
    """Reflect-pad the last two axes at the bottom/right edges."""
    if bottom == 0 and right == 0:
        return x
    H, W = x.shape[-2:]
    rows = np.pad(np.arange(H), (0, bottom), mode="reflect")
    cols = np.pad(np.arange(W), (0, right), mode="reflect")
    fold_rows = np.eye(H, dtype=x.data.dtype)[rows].T
    fold_cols = np.eye(W, dtype=x.data.dtype)[cols]

    def backward(g):
        return (fold_rows @ (g @ fold_cols),)

    return Tensor._result(x.data[..., rows[:, None], cols[None, :]], (x,), backward)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: ``[B, C*s*s, H, W] -> [B, C, H*s, W*s]``."""
    B, cs, H, W = x.shape
    if cs % (s * s):
        raise DimensionError(f"pixel_shuffle: {cs} channels not divisible by s^2={s * s}")
    c = cs // (s * s)
    y = reshape(x, (B, c, s, s, H, W))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (B, c, H * s, W * s))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    B, c, Hs, Ws = x.shape
    if Hs % s or Ws % s:
        raise DimensionError(f"pixel_unshuffle: spatial dims {Hs}x{Ws} not divisible by {s}")
    H, W = Hs // s, Ws // s
    y = reshape(x, (B, c, H, s, W, s))
    y = permute(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (B, c * s * s, H, W))


def window_partition(x: Tensor, M: int) -> Tensor:
    """``[B, C, H, W] -> [B * (H/M) * (W/M), M*M, C]``, windows row-major."""
    B, C, H, W = x.shape
    if H % M or W % M:
        raise DimensionError(
            f"window_partition: spatial dims {H}x{W} not divisible by window {M}; pad the input first"
        )
    y = reshape(x, (B, C, H // M, M, W // M, M))
    y = permute(y, (0, 2, 4, 3, 5, 1))
    return reshape(y, (B * (H // M) * (W // M), M * M, C))


def window_merge(windows: Tensor, M: int, B: int, H: int, W: int) -> Tensor:
    C = windows.shape[-1]
    y = reshape(windows, (B, H // M, W // M, M, M, C))
    y = permute(y, (0, 5, 1, 3, 2, 4))
    return reshape(y, (B, C, H, W))


def _check_index(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"window index out of range [0, {n}): {idx.tolist()}")
    if np.unique(idx).size != idx.size:
        raise IndexError(f"duplicate window indices: {idx.tolist()}")
    return idx


def gather_windows(x: Tensor, idx) -> Tensor:
    """Select windows (rows of the leading axis) in the order of ``idx``."""
    n = x.shape[0]
    idx = _check_index(idx, n)
    shape, dt = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return Tensor._result(x.data[idx], (x,), backward)


def scatter_windows(pieces: Sequence[tuple[Tensor, Iterable[int]]], n: int) -> Tensor:
    """Place each ``(values, idx)`` piece at its window rows; rows must partition ``[0, n)``."""
    idxs = [_check_index(i, n) for _, i in pieces]
    allidx = np.concatenate(idxs) if idxs else np.zeros(0, np.int64)
    if np.unique(allidx).size != allidx.size or allidx.size != n:
        raise IndexError(f"scatter indices must partition [0, {n}) exactly")
    tensors = tuple(t for t, _ in pieces)
    ref = tensors[0]
    out = np.empty((n,) + ref.shape[1:], dtype=ref.data.dtype)
    for t, i in zip(tensors, idxs):
        if i.size:
            out[i] = t.data

    def backward(g):
        return tuple(g[i] for i in idxs)

    return Tensor._result(out, tensors, backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward ``hard``; backward routes the gradient to ``soft`` unchanged."""
    return Tensor._result(np.asarray(hard, dtype=soft.data.dtype), (soft,), lambda g: (g,))


def gumbel_softmax(logits: Tensor, temperature: float = 1.0, rng=None, hard: bool = False, noise=None) -> Tensor:
    """Sample a relaxed categorical over the last axis.

    ``noise`` may be given explicitly (pre-drawn Gumbel samples); otherwise it
    is drawn from ``rng`` as ``-log(-log(u))`` in C order over ``logits``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = rng.gumbel(logits.shape)
    z = add(logits, Tensor(noise, dtype=logits.dtype))
    soft = softmax(mul(z, 1.0 / temperature), axis=-1)
    if not hard:
        return soft
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, soft.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return straight_through(onehot, soft)
