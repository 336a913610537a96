"""Dense tensors with a reverse-mode tape.

Every differentiable operation in the package is defined here, each with an
explicit vector-Jacobian product registered in ``VJP``. Operations are
recorded only while a :class:`Tape` is active and at least one input requires
gradients; outside a tape they run as plain numpy.

    >>> x = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = x.sum()
    >>> grads = tape.backward(loss)
    >>> grads[x]
    array([[1., 1.],
           [1., 1.]])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Immutable-by-convention wrapper around an ndarray.

    ``data`` may be replaced wholesale (optimizers do this), but op outputs are
    marked read-only so they are never mutated in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; scalars never broadcast against tensors except via scale/shift
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def abs(self):
        return tabs(self)

    def square(self):
        return square(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    ctx: object


_local = threading.local()


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    which is a topological order by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: Node):
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def __contains__(self, tensor):
        return id(tensor) in self._produced

    def backward(self, loss: Tensor) -> dict:
        return backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> dict:
    """Propagate d(loss)/d(.) back through ``tape``.

    Returns a dict keyed by tensor (identity) holding the gradient of every
    leaf that requires gradients, plus ``loss`` itself. Leaf ``.grad``
    attributes are accumulated as a side effect.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = VJP[node.op](node.ctx, g, needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if t not in tape:
                leaves[key] = t
        if node.output is not loss:
            del grads[id(node.output)]
    out = {loss: grads[id(loss)]}
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    return out


VJP: dict[str, Callable] = {}


def register(name):
    def deco(fn):
        VJP[name] = fn
        return fn

    return deco


def _emit(op, data, inputs, ctx=None):
    data = np.asarray(data)
    data.flags.writeable = False
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, tuple(inputs), out, ctx))
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -----------------------------------------------------------

def add(a, b):
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@register("add")
def _add_vjp(ctx, g, needs):
    return g, g


def sub(a, b):
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@register("sub")
def _sub_vjp(ctx, g, needs):
    return g, -g


def mul(a, b):
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), (a.data, b.data))


@register("mul")
def _mul_vjp(ctx, g, needs):
    a, b = ctx
    return g * b, g * a


def scale(a, s):
    s = float(s)
    return _emit("scale", a.data * s, (a,), s)


@register("scale")
def _scale_vjp(s, g, needs):
    return (g * s,)


def shift(a, c):
    return _emit("shift", a.data + float(c), (a,))


@register("shift")
def _shift_vjp(ctx, g, needs):
    return (g,)


def tabs(a):
    return _emit("abs", np.abs(a.data), (a,), a.data)


@register("abs")
def _abs_vjp(x, g, needs):
    return (g * np.sign(x),)


def square(a):
    return _emit("square", a.data * a.data, (a,), a.data)


@register("square")
def _square_vjp(x, g, needs):
    return (2.0 * x * g,)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), a.data)


@register("log")
def _log_vjp(x, g, needs):
    return (g / x,)


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", out, (a,), out)


@register("sigmoid")
def _sigmoid_vjp(s, g, needs):
    return (g * s * (1.0 - s),)


def leaky_relu(a, slope=0.2):
    x = a.data
    return _emit("leaky_relu", np.where(x > 0, x, x * slope), (a,), (x > 0, slope))


@register("leaky_relu")
def _leaky_vjp(ctx, g, needs):
    pos, slope = ctx
    return (np.where(pos, g, g * slope),)


def clamp(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clamp", np.clip(x, lo, hi), (a,), inside)


@register("clamp")
def _clamp_vjp(inside, g, needs):
    return (g * inside,)


# --- reductions and reshapes -----------------------------------------------

def tsum(a):
    return _emit("sum", a.data.sum(), (a,), a.shape)


@register("sum")
def _sum_vjp(shape, g, needs):
    return (np.broadcast_to(g, shape).copy(),)


def mean(a):
    return _emit("mean", a.data.mean(), (a,), a.shape)


@register("mean")
def _mean_vjp(shape, g, needs):
    n = int(np.prod(shape)) if shape else 1
    return (np.broadcast_to(g / n, shape).copy(),)


def reshape(a, shape):
    return _emit("reshape", a.data.reshape(shape), (a,), a.shape)


@register("reshape")
def _reshape_vjp(shape, g, needs):
    return (g.reshape(shape),)


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return _emit("transpose", np.swapaxes(a.data, -1, -2), (a,))


@register("transpose")
def _transpose_vjp(ctx, g, needs):
    return (np.swapaxes(g, -1, -2),)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), (a.data, b.data))


@register("matmul")
def _matmul_vjp(ctx, g, needs):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2) if needs[0] else None
    gb = np.swapaxes(a, -1, -2) @ g if needs[1] else None
    return ga, gb


def concat(tensors: Sequence[Tensor], axis=-3):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: {t.shape} does not match {tuple(ref)} off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, (ax, sizes))


@register("concat")
def _concat_vjp(ctx, g, needs):
    ax, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


# --- spatial ops (last two axes are H, W) ----------------------------------

def upsample2x(a):
    if a.ndim < 2:
        raise ShapeError("upsample2x needs rank >= 2")
    return _emit("upsample2x", a.data.repeat(2, axis=-2).repeat(2, axis=-1), (a,))


@register("upsample2x")
def _upsample_vjp(ctx, g, needs):
    *lead, h, w = g.shape
    return (g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1)),)


def avgpool2x(a):
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even spatial size, got {h}x{w}")
    out = a.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return _emit("avgpool2x", out, (a,))


@register("avgpool2x")
def _avgpool_vjp(ctx, g, needs):
    return ((g * 0.25).repeat(2, axis=-2).repeat(2, axis=-1),)


def bias_add(x, b):
    """Add a per-channel bias; channels are axis -3."""
    if b.ndim != 1 or x.ndim < 3 or x.shape[-3] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match input {x.shape}")
    return _emit("bias_add", x.data + b.data[:, None, None], (x, b))


@register("bias_add")
def _bias_vjp(ctx, g, needs):
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
    return g, g.sum(axis=axes)


def _pad_index(n, p):
    idx = np.arange(n)
    return np.pad(idx, p, mode="reflect") if n > 1 else np.zeros(n + 2 * p, dtype=int)


def pad2d(x, ph, pw, mode):
    """Pad the last two axes of an ndarray by (ph, pw) on each side."""
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
        return np.pad(x, widths)
    if mode == "reflect":
        ri = _pad_index(x.shape[-2], ph)
        ci = _pad_index(x.shape[-1], pw)
        return x[..., ri, :][..., ci]
    raise ValueError(f"unknown padding mode {mode!r}")


def _pad_adjoint_axis(g, n, p, axis, mode):
    core = np.take(g, np.arange(p, p + n), axis=axis)
    if mode == "zero" or p == 0:
        return core
    core = np.moveaxis(core, axis, 0).copy()
    gm = np.moveaxis(g, axis, 0)
    idx = _pad_index(n, p)
    for r in list(range(p)) + list(range(p + n, n + 2 * p)):
        core[idx[r]] += gm[r]
    return np.moveaxis(core, 0, axis)


def unpad2d(g, h, w, ph, pw, mode):
    """Adjoint of :func:`pad2d`."""
    g = _pad_adjoint_axis(g, h, ph, g.ndim - 2, mode)
    return _pad_adjoint_axis(g, w, pw, g.ndim - 1, mode)


def conv2d(x, w, padding="reflect"):
    """Same-size cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``w`` (K,C,kh,kw)."""
    if w.ndim != 4:
        raise ShapeError(f"kernels must be K x C x kh x kw, got {w.shape}")
    k, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {kh}x{kw}")
    if padding not in ("reflect", "zero"):
        raise ValueError(f"unknown padding mode {padding!r}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != c:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, kernels expect {c}")
    n, _, h, wd = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = pad2d(xd, ph, pw, padding)
    cols = kernels.im2col(xp, kh, kw)
    wmat = w.data.reshape(k, -1)
    out = (wmat @ cols).reshape(k, n, h, wd).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    ctx = (cols, xp.shape, (h, wd), wmat, w.shape, squeeze, padding, ph, pw)
    return _emit("conv2d", out, (x, w), ctx)


@register("conv2d")
def _conv2d_vjp(ctx, g, needs):
    cols, xp_shape, (h, wd), wmat, wshape, squeeze, padding, ph, pw = ctx
    if squeeze:
        g = g[None]
    k = wshape[0]
    g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
    gw = (g2 @ cols.T).reshape(wshape) if needs[1] else None
    gx = None
    if needs[0]:
        gcols = wmat.T @ g2
        gxp = kernels.col2im(gcols, xp_shape, wshape[2], wshape[3])
        gx = unpad2d(gxp, h, wd, ph, pw, padding)
        if squeeze:
            gx = gx[0]
    return gx, gw


def channel_max(x):
    """Per-pixel max over the channel axis (-3).

    Returns ``(values, indices)``: values keep a singleton channel axis,
    indices are a plain integer array (no gradient). Ties go to the lowest
    channel index.
    """
    if x.ndim < 3 or x.shape[-3] < 1:
        raise ShapeError(f"channel_max needs a channel axis, got {x.shape}")
    idx = np.argmax(x.data, axis=-3)
    vals = np.take_along_axis(x.data, idx[..., None, :, :], axis=-3)
    return _emit("channel_max", vals, (x,), (x.shape, idx)), idx


@register("channel_max")
def _channel_max_vjp(ctx, g, needs):
    shape, idx = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    np.put_along_axis(gx, idx[..., None, :, :], g, axis=-3)
    return (gx,)
