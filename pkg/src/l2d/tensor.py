"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  ``backward``
walks the graph once in reverse topological order and accumulates gradients
into the trainable leaves.

Layout is row-major and broadcasting follows numpy's trailing-dimension rules.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from l2d import _kernels

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from exc


class Tensor:
    """A numpy array that participates in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- construction -------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out.op = op
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        src = self.dtype
        return Tensor._from_op(self.data.astype(dtype), (self,), lambda g: (g.astype(src),), "astype")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -- method aliases -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    # -- differentiation ----------------------------------------------------

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    ``loss`` must be a scalar unless an explicit upstream ``grad`` is given.
    Calling this twice without zeroing accumulates additively.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = _as_array(grad, loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Wrap a precomputed forward value with a user-supplied backward closure.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return Tensor._from_op(np.asarray(data), parents, backward_fn, op)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else DEFAULT_DTYPE))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    ad = a.data
    p = float(exponent)
    out = ad ** p
    return Tensor._from_op(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of a non-positive value; clamp the input first")
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to ``a``."""
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0), ad.shape),
                _unbroadcast(np.where(pick_a, 0, g), bd.shape))

    return Tensor._from_op(np.maximum(ad, bd), (a, b), bw, "max")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0)
    return Tensor._from_op(out, (a,), lambda g: (g * (ad > 0),), "relu")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return Tensor._from_op(out, (a,), lambda g: (g * inside,), "clamp")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.exp(-np.logaddexp(0, -ad)).astype(ad.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, pow, log, exp, abs, max."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}
    unary = {"log": log, "exp": exp, "abs": abs_}
    if kind in binary:
        return binary[kind](a, b)
    if kind == "pow":
        return power(a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.asarray(a.data[index]), (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules on the leading dimensions."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    return a, b


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax")


def l2_distance(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm of ``a - b`` along ``axis``.

    The subgradient at ``a == b`` is taken to be zero.
    """
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=axis))

    def bw(g):
        d = np.expand_dims(dist, axis)
        safe = np.where(d > 0, d, 1)
        unit = np.where(d > 0, diff / safe, 0)
        ga = np.expand_dims(g, axis) * unit
        return ga, -ga

    return Tensor._from_op(dist, (a, b), bw, "l2_distance")


def huber(a, b) -> Tensor:
    """Elementwise Huber penalty with unit threshold between ``a`` and ``b``."""
    a, b = _binary(a, b)
    r = a.data - b.data
    ar = np.abs(r)
    out = np.where(ar <= 1, 0.5 * r * r, ar - 0.5).astype(r.dtype)

    def bw(g):
        d = np.where(ar <= 1, r, np.sign(r)) * g
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return Tensor._from_op(out, (a, b), bw, "huber")


# ---------------------------------------------------------------------------
# convolution / pooling (NHWC)
# ---------------------------------------------------------------------------


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution.

    ``x`` is [B, H, W, Cin], ``weight`` is [3, 3, Cin, Cout].
    """
    if x.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[3]):
        raise ShapeError(f"conv3x3 shapes incompatible: x {x.shape}, weight {weight.shape}")
    B, H, W, C = x.shape
    cout = weight.shape[3]
    xd = np.ascontiguousarray(x.data)
    cols = _kernels.im2col3x3(xd).reshape(B * H * W, 9 * C)
    wmat = weight.data.reshape(9 * C, cout)
    out = (cols @ wmat).reshape(B, H, W, cout)
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(B * H * W, cout)
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(g2 @ wmat.T).reshape(B, H, W, 9 * C)
            gx = _kernels.col2im3x3(gcols, C)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv3x3")


def avg_pool2x2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial extents, got {H}x{W}")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        g = np.broadcast_to((g * 0.25)[:, :, None, :, None, :], (B, H // 2, 2, W // 2, 2, C))
        return (g.reshape(B, H, W, C),)

    return Tensor._from_op(out, (x,), bw, "avg_pool2x2")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5) -> float:
    """Compare autodiff gradients of ``f`` against central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called with them as
    positional arguments and must return a scalar.  Inputs are perturbed in
    place and restored.  Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    xs: list[Tensor] = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*xs)
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        with no_grad():
            for t, ga in zip(xs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f(*xs).data)
                    flat[i] = orig - h
                    fm = float(f(*xs).data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    err = abs(gflat[i] - num) / max(1.0, abs(num))
                    worst = max(worst, err)
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
