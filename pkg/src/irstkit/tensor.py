"""Minimal reverse-mode autodiff over 4-D NCHW arrays.

Every node in the graph is a Tensor wrapping a numpy array of shape
(N, C, H, W). Ops record closures computing vector-Jacobian products and
``backward`` walks the graph once in reverse topological order, accumulating
into ``.grad``. All shapes stay rank-4 throughout (parameters included), which
keeps broadcasting rules trivial: axes may only differ where one side is 1.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConvParams",
    "BatchNormParams",
    "no_grad",
    "set_finite_checks",
    "backward",
    "conv2d",
    "batch_norm",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "sqrt",
    "clamp_min",
    "exp",
    "log",
    "axis_mean",
    "concat_channels",
    "channel_slice",
    "upsample",
    "maxpool2",
    "tsum",
    "soft_iou_loss",
]

_node_ids = itertools.count()
_CHECK_FINITE = True
_GRAD_ENABLED = True

_AXIS_NAMES = {"channel": (1,), "height": (2,), "width": (3,), "spatial": (2, 3)}


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(values, what):
    if _CHECK_FINITE and not np.isfinite(values).all():
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        values = np.asarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        if values.ndim != 4:
            raise ShapeError(f"expected an NCHW array, got shape {values.shape}")
        _check_finite(values, "tensor")
        self.values = values
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = ()
        self._vjp = None

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float32, requires_grad=False):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return _binary(self, _coerce(other, self), np.add, "add")

    def __radd__(self, other):
        return _binary(_coerce(other, self), self, np.add, "add")

    def __sub__(self, other):
        return _binary(self, _coerce(other, self), np.subtract, "sub")

    def __rsub__(self, other):
        return _binary(_coerce(other, self), self, np.subtract, "sub")

    def __mul__(self, other):
        return _binary(self, _coerce(other, self), np.multiply, "mul")

    def __rmul__(self, other):
        return _binary(_coerce(other, self), self, np.multiply, "mul")

    def __truediv__(self, other):
        return _binary(self, _coerce(other, self), np.divide, "div")

    def __rtruediv__(self, other):
        return _binary(_coerce(other, self), self, np.divide, "div")

    def __neg__(self):
        return _result(-self.values, (self,), lambda g: (-g,))


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.full((1, 1, 1, 1), other, dtype=like.dtype))


def _result(values, parents, vjp) -> Tensor:
    """Build an op output node; graph edges are dropped when grads are off."""
    out = Tensor.__new__(Tensor)
    _check_finite(values, "op output")
    out.values = values
    out.grad = None
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out.node_id = next(_node_ids)
    out._parents = tuple(parents) if req else ()
    out._vjp = vjp if req else None
    return out


# -- backward pass -------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every reachable node.

    Calling twice without clearing grads doubles them: each pass computes a
    fresh gradient table and adds it onto whatever .grad already holds.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg


# -- elementwise binary ----------------------------------------------------


def _broadcastable(sa, sb):
    return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))


def _reduce_to(g, shape):
    """Sum grad over axes the forward broadcast expanded."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, ufunc, kind: str) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")
    if kind == "div" and np.abs(b.values).min() < 1e-12:
        raise ZeroDivisionError("div: denominator magnitude below 1e-12")
    av, bv = a.values, b.values
    out = ufunc(av, bv)

    if kind == "add":
        vjp = lambda g: (_reduce_to(g, av.shape), _reduce_to(g, bv.shape))
    elif kind == "sub":
        vjp = lambda g: (_reduce_to(g, av.shape), _reduce_to(-g, bv.shape))
    elif kind == "mul":
        vjp = lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape))
    else:  # div
        vjp = lambda g: (
            _reduce_to(g / bv, av.shape),
            _reduce_to(-g * av / (bv * bv), bv.shape),
        )
    return _result(out, (a, b), vjp)


# -- elementwise unary ------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    v = x.values
    # derivative at exactly 0 is defined as the slope, so the mask uses > 0
    dv = np.where(v > 0, v.dtype.type(1.0), v.dtype.type(slope))
    return _result(v * dv, (x,), lambda g: (g * dv,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # clipping at |60| only touches the saturated tail (sigma' ~ 1e-26 there)
    v = np.clip(x.values, -60.0, 60.0)
    y = 1.0 / (1.0 + np.exp(-v))
    return _result(y.astype(x.dtype, copy=False), (x,), lambda g: (g * y * (1.0 - y),))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.values)
    return _result(y, (x,), lambda g: (g * 0.5 / y,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    v = x.values
    return _result(np.log(v), (x,), lambda g: (g / v,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    v = x.values
    out = np.maximum(v, floor)
    mask = (v > floor).astype(v.dtype)
    return _result(out, (x,), lambda g: (g * mask,))


# -- reductions / shape ops ---------------------------------------------------


def axis_mean(x: Tensor, axis: str) -> Tensor:
    """Mean over 'channel', 'height', 'width' or 'spatial'; axes kept as size 1."""
    if axis not in _AXIS_NAMES:
        raise ValueError(f"axis must be one of {sorted(_AXIS_NAMES)}, got {axis!r}")
    axes = _AXIS_NAMES[axis]
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    out = x.values.mean(axis=axes, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / count, x.shape),)

    return _result(out, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = x.values.sum().reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"channel_slice [{start}:{stop}] out of range for C={x.shape[1]}")
    out = x.values[:, start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return _result(out, (x,), vjp)


# -- convolution -------------------------------------------------------------


@dataclass
class ConvParams:
    """2-D convolution parameters: weight (C_out, C_in, k, k), bias (1, C_out, 1, 1)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    w, b, s, pad = p.weight, p.bias, p.stride, p.padding
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")
    k = kh
    if (h + 2 * pad - k) % s != 0 or (wd + 2 * pad - k) % s != 0:
        raise ShapeError(
            f"conv2d: size {h}x{wd} with k={k} pad={pad} stride={s} "
            "does not produce integer output dims"
        )
    ho = (h + 2 * pad - k) // s + 1
    wo = (wd + 2 * pad - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output dims {ho}x{wo}")

    # im2col in batched (N, C*k*k, Ho*Wo) layout: the GEMM output lands directly
    # in NCHW order and 1x1/stride-1 convolutions need no copy at all
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    if k == 1 and s == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        if s > 1:
            win = win[:, :, ::s, ::s]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
            n, c * k * k, ho * wo
        )
    wm = w.values.reshape(c_out, c * k * k)
    out = np.matmul(wm, cols).reshape(n, c_out, ho, wo)
    out += b.values.reshape(1, c_out, 1, 1)

    def vjp(g):
        gmat = g.reshape(n, c_out, ho * wo)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
        gcols = np.matmul(wm.T, gmat)
        if k == 1 and s == 1:
            return (gcols.reshape(n, c, h, wd), gw, gb)
        gcols = gcols.reshape(n, c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += gcols[:, :, ki, kj]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb)

    return _result(out, (x, w, b), vjp)


# -- batch normalization ----------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with running statistics.

    Train mode normalizes with batch statistics over (N, H, W) and updates the
    running buffers; eval mode requires at least one prior train-mode update.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"
    initialized: bool = False

    @staticmethod
    def create(channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        return BatchNormParams(
            gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    c = x.shape[1]
    if p.gamma.shape[1] != c:
        raise ShapeError(f"batch_norm: input has {c} channels, params have {p.gamma.shape[1]}")

    if p.mode == "train":
        mu = x.values.mean(axis=(0, 2, 3), keepdims=True)
        var = x.values.var(axis=(0, 2, 3), keepdims=True)
        p.running_mean = ((1.0 - p.momentum) * p.running_mean + p.momentum * mu.reshape(c)).astype(
            p.running_mean.dtype
        )
        p.running_var = ((1.0 - p.momentum) * p.running_var + p.momentum * var.reshape(c)).astype(
            p.running_var.dtype
        )
        p.initialized = True
        ivar = 1.0 / np.sqrt(var + p.eps)
        xhat = (x.values - mu) * ivar
        out = p.gamma.values * xhat + p.beta.values

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(p.gamma.shape)
            dbeta = g.sum(axis=(0, 2, 3)).reshape(p.beta.shape)
            gm = g.mean(axis=(0, 2, 3), keepdims=True)
            gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = p.gamma.values * ivar * (g - gm - xhat * gxm)
            return (gx, dgamma, dbeta)

        return _result(out, (x, p.gamma, p.beta), vjp)

    if p.mode == "eval":
        if not p.initialized:
            raise RuntimeError("batch_norm: eval mode before any running-stat update")
        rm = p.running_mean.reshape(1, c, 1, 1)
        rv = p.running_var.reshape(1, c, 1, 1)
        ivar = 1.0 / np.sqrt(rv + p.eps)
        xhat = (x.values - rm) * ivar
        out = p.gamma.values * xhat + p.beta.values

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(p.gamma.shape)
            dbeta = g.sum(axis=(0, 2, 3)).reshape(p.beta.shape)
            return (p.gamma.values * ivar * g, dgamma, dbeta)

        return _result(out, (x, p.gamma, p.beta), vjp)

    raise ValueError(f"batch_norm: unknown mode {p.mode!r}")


# -- resampling --------------------------------------------------------------


_BILINEAR_CACHE: dict = {}


def _bilinear_matrix(size: int, dtype) -> np.ndarray:
    """(2*size, size) interpolation matrix: dst = (src+0.5)/2-0.5, edge-clamped."""
    key = (size, np.dtype(dtype).name)
    cached = _BILINEAR_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((2 * size, size), dtype=dtype)
    for d in range(2 * size):
        src = (d + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        w1 = src - i0
        m[d, min(max(i0, 0), size - 1)] += 1.0 - w1
        m[d, min(max(i0 + 1, 0), size - 1)] += w1
    _BILINEAR_CACHE[key] = m
    return m


def upsample(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double H and W, bilinear by default ('nearest' as fallback)."""
    n, c, h, w = x.shape
    v = x.values
    if mode == "nearest":
        out = v.repeat(2, axis=2).repeat(2, axis=3)

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _result(out, (x,), vjp)

    if mode != "bilinear":
        raise ValueError(f"upsample: unknown mode {mode!r}")

    uh = _bilinear_matrix(h, v.dtype)
    uw = _bilinear_matrix(w, v.dtype)
    out = np.matmul(np.matmul(uh, v), uw.T)

    def vjp(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _result(out, (x,), vjp)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; gradient routes to the first max in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    win = x.values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), vjp)


# -- loss ----------------------------------------------------------------------


def soft_iou_loss(pred: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """1 - (sum(p*y)+eps)/(sum(p)+sum(y)-sum(p*y)+eps), jointly over the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"soft_iou_loss: shape mismatch {pred.shape} vs {target.shape}")
    pv = pred.values
    if pv.min() < -1e-6 or pv.max() > 1.0 + 1e-6:
        raise ValueError(
            f"soft_iou_loss: pred outside [0,1] (min={pv.min():.3g}, max={pv.max():.3g})"
        )
    inter = tsum(pred * target)
    union = tsum(pred) + tsum(target) - inter
    return 1.0 - (inter + eps) / (union + eps)
