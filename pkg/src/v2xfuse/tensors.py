"""Dense arrays with reverse-mode differentiation.

Only the operations the perception pipeline needs are provided.  Every
operation records a closure mapping the upstream gradient to gradients for
its parents; :meth:`DiffTensor.backward` replays them in reverse
topological order.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DiffTensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None, retain_graph: bool = False, retain_grads: bool = False) -> None:
        """Accumulate ``d self / d leaf`` into every reachable leaf's ``grad``.

        Intermediate nodes only keep their gradient when ``retain_grads`` is
        set; training leaves it off to save the copies.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaves (parameters, inputs) keep their gradient; intermediates do not
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if retain_grads:
                node.grad = g
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return DiffTensor(np.asarray(x, dtype=np.float64))
    return DiffTensor(x, dtype=dtype)


def _topological(root: DiffTensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def graph_census(root: DiffTensor) -> dict:
    """Count recorded operations by name in the graph under ``root``."""
    counts: dict = {}
    for node in _topological(root):
        if node._backward is not None:
            counts[node.op] = counts.get(node.op, 0) + 1
    return counts


def _result(data, parents, backward, op) -> DiffTensor:
    out = DiffTensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars adopt the other operand's precision
    if a.data.ndim == 0 and not a.requires_grad and b.data.dtype != a.data.dtype:
        a = DiffTensor(a.data.astype(b.data.dtype))
    elif b.data.ndim == 0 and not b.requires_grad and a.data.dtype != b.data.dtype:
        b = DiffTensor(b.data.astype(a.data.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def scale(x, factor: float) -> DiffTensor:
    return mul(x, float(factor))


def relu(x) -> DiffTensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> DiffTensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> DiffTensor:
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data).astype(x.dtype)
    s = 0.5 * (1.0 - np.tanh(0.5 * x.data))  # sigmoid(-x)
    return _result(y, (x,), lambda g: (g * s,), "log_sigmoid")


def tanh(x) -> DiffTensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def pow_(x, exponent: float) -> DiffTensor:
    """``x ** exponent`` for non-negative ``x``."""
    x = as_tensor(x)
    xd = x.data
    y = np.power(xd, exponent)
    return _result(y, (x,), lambda g: (g * exponent * np.power(xd, exponent - 1.0),), "pow")


def smooth_l1(x, beta: float = 1.0) -> DiffTensor:
    """Elementwise Huber-style penalty, quadratic inside ``|x| < beta``."""
    x = as_tensor(x)
    xd = x.data
    ax = np.abs(xd)
    y = np.where(ax < beta, 0.5 * xd * xd / beta, ax - 0.5 * beta).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * np.clip(xd / beta, -1.0, 1.0),), "smooth_l1")


# ---------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims=False) -> DiffTensor:
    x = as_tensor(x)
    shape = x.shape
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(y), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> DiffTensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> DiffTensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> DiffTensor:
    x = as_tensor(x)
    shape, dt = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> DiffTensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def einsum(spec: str, *operands) -> DiffTensor:
    """Differentiable einsum (explicit ``->`` form, no repeated letters per operand)."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(ops):
        raise ShapeError(f"einsum spec {spec!r} expects {len(subs)} operands")
    for s in subs:
        if len(set(s)) != len(s):
            raise ShapeError("repeated subscripts within an operand are not supported")
    data = np.einsum(spec, *[o.data for o in ops], optimize=True)

    def bw(g):
        grads = []
        for k, (sk, ok) in enumerate(zip(subs, ops)):
            if not ok.requires_grad:
                grads.append(None)
                continue
            others = [s for i, s in enumerate(subs) if i != k]
            avail = set(out_sub).union(*others) if others else set(out_sub)
            reduced = "".join(ch for ch in sk if ch in avail)
            terms = ",".join([out_sub] + others)
            arrs = [g] + [o.data for i, o in enumerate(ops) if i != k]
            gk = np.einsum(f"{terms}->{reduced}", *arrs, optimize=True)
            if reduced != sk:
                shape = [ok.shape[i] if ch in avail else 1 for i, ch in enumerate(sk)]
                gk = np.broadcast_to(gk.reshape(shape), ok.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _result(np.asarray(data), ops, bw, "einsum")


# ---------------------------------------------------------------- normalisation


def softmax(x, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def layer_norm(x, axis: int = 0, gain=None, bias=None, eps: float = 1e-5) -> DiffTensor:
    """Normalise along ``axis`` (channels), then apply optional affine terms."""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - np.mean(g, axis=axis, keepdims=True)
                       - xhat * np.mean(g * xhat, axis=axis, keepdims=True)),)

    out = _result(xhat, (x,), bw, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- convolution


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Cross-correlation of ``x`` (C_in,H,W) with ``kernel`` (C_out,C_in,kH,kW)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and 4-D kernel, got {x.shape}, {kernel.shape}")
    C_out, C_in, kH, kW = kernel.shape
    if x.shape[0] != C_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {C_in}")
    if kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError("conv2d kernels must have odd spatial size")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d needs padding >= 0 and stride >= 1")
    _, H, W = x.shape
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d output would be empty")
    kd = kernel.data

    if kH == 1 and kW == 1 and stride == 1 and padding == 0:
        k2 = kd.reshape(C_out, C_in)
        xf = x.data.reshape(C_in, H * W)
        out = (k2 @ xf).reshape(C_out, H, W)

        def bw(g):
            gf = g.reshape(C_out, H * W)
            gx = (k2.T @ gf).reshape(C_in, H, W) if x.requires_grad else None
            gk = (gf @ xf.T).reshape(kd.shape) if kernel.requires_grad else None
            return gx, gk
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
        # im2col: (C_in, kH, kW, Ho, Wo) laid out so one GEMM does the whole correlation
        if stride == 1:
            cols = kernels.im2col(xp, kH, kW, Ho, Wo)
        else:
            cols = np.empty((C_in, kH, kW, Ho, Wo), dtype=xp.dtype)
            for i in range(kH):
                for j in range(kW):
                    cols[:, i, j] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols2 = cols.reshape(C_in * kH * kW, Ho * Wo)
        k2 = kd.reshape(C_out, C_in * kH * kW)
        out = (k2 @ cols2).reshape(C_out, Ho, Wo)

        def bw(g):
            gx = gk = None
            g2 = g.reshape(C_out, Ho * Wo)
            if kernel.requires_grad:
                gk = (g2 @ cols2.T).reshape(kd.shape)
            if x.requires_grad:
                gcols = (k2.T @ g2).reshape(C_in, kH, kW, Ho, Wo)
                if stride == 1:
                    gxp = kernels.col2im(gcols, xp.shape[1], xp.shape[2])
                else:
                    gxp = np.zeros(xp.shape, dtype=xp.dtype)
                    for i in range(kH):
                        for j in range(kW):
                            gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
                gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
            return gx, gk

    res = _result(out, (x, kernel), bw, "conv2d")
    if bias is not None:
        res = add(res, reshape(bias, (C_out, 1, 1)))
    return res


def depthwise_conv2d(x, kernel, bias=None) -> DiffTensor:
    """Per-channel same-padded convolution; ``kernel`` is (C,1,kH,kW)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d shapes invalid: {x.shape}, {kernel.shape}")
    C, H, W = x.shape
    if kernel.shape[0] != C:
        raise ShapeError(f"depthwise kernel has {kernel.shape[0]} filters for {C} channels")
    _, _, kH, kW = kernel.shape
    if kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError("depthwise kernels must have odd spatial size")
    ph, pw = kH // 2, kW // 2
    dt = np.result_type(x.dtype, kernel.dtype)
    xp = np.pad(x.data.astype(dt, copy=False), ((0, 0), (ph, ph), (pw, pw)))
    kd = kernel.data[:, 0].astype(dt, copy=False)
    out = kernels.depthwise_forward(xp, kd, H, W)

    def bw(g):
        gxp, gk = kernels.depthwise_backward(xp, kd, g)
        gx = gxp[:, ph:ph + H, pw:pw + W] if x.requires_grad else None
        return gx, (gk[:, None] if kernel.requires_grad else None)

    res = _result(out, (x, kernel), bw, "depthwise_conv2d")
    if bias is not None:
        res = add(res, reshape(bias, (C, 1, 1)))
    return res


def depthwise_separable_conv(x, depthwise_kernel, pointwise_kernel,
                             depthwise_bias=None, pointwise_bias=None) -> DiffTensor:
    """Depthwise spatial filtering followed by 1x1 channel mixing."""
    x = as_tensor(x)
    pointwise_kernel = as_tensor(pointwise_kernel)
    if pointwise_kernel.ndim != 4 or pointwise_kernel.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernel must be (C_out,C,1,1), got {pointwise_kernel.shape}")
    if pointwise_kernel.shape[1] != x.shape[0]:
        raise ShapeError(
            f"pointwise kernel expects {pointwise_kernel.shape[1]} channels, input has {x.shape[0]}"
        )
    h = depthwise_conv2d(x, depthwise_kernel, depthwise_bias)
    return conv2d(h, pointwise_kernel, pointwise_bias)


# ---------------------------------------------------------------- sampling


def pixel_scale(n: int) -> float:
    """Pixels per normalised unit under the cell-centre convention."""
    return (n - 1) / 2.0 if n > 1 else 0.0


def bilinear_sample(x, grid) -> DiffTensor:
    """Sample ``x`` (C,H,W) at normalised ``grid`` (H',W',2) points, zero padded.

    Grid entries are (x, y); -1 and +1 land on the centres of the first and
    last cells along each axis.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if x.ndim != 3 or grid.ndim != 3 or grid.shape[2] != 2:
        raise ShapeError(f"bilinear_sample shapes invalid: {x.shape}, {grid.shape}")
    C, H, W = x.shape
    sx, sy = pixel_scale(W), pixel_scale(H)
    gd = grid.data.astype(x.dtype, copy=False)
    px = (gd[..., 0] + 1.0) * sx
    py = (gd[..., 1] + 1.0) * sy
    out = kernels.bilinear_forward(x.data, px, py)
    xd = x.data

    def bw(g):
        gsrc, gpx, gpy = kernels.bilinear_backward(xd, px, py, g)
        ggrid = np.stack([gpx * sx, gpy * sy], axis=-1) if grid.requires_grad else None
        return (gsrc if x.requires_grad else None), ggrid

    return _result(out, (x, grid), bw, "bilinear_sample")


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], DiffTensor], params: Sequence[DiffTensor],
               epsilon: float = 1e-6, abs_floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure.  The per-element
    error is ``|a - n| / max(|a|, |n|, abs_floor)``.  Non-finite function
    values make the check fail (``inf`` is returned).
    """
    for p in params:
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(loss.data)):
        return math.inf
    loss.backward()
    worst = 0.0
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            with no_grad():
                flat[k] = orig + epsilon
                fp = f().item()
                flat[k] = orig - epsilon
                fm = f().item()
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            num = (fp - fm) / (2.0 * epsilon)
            a = float(aflat[k])
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, err)
    return worst
