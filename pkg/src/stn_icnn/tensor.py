"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every operation that involves a
tensor requiring gradients records a graph node (its parents plus a closure
mapping the output gradient to parent gradients).  :func:`backward` walks the
graph in reverse topological order and accumulates gradients into leaves.

Gradient convention: leaves that are not reachable from the root keep
whatever ``grad`` they had before the call (``None`` if never set).  Call
``zero_grad`` on a model to get explicit zero buffers.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NonFiniteError",
    "tensor_op",
    "backward",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "concat",
    "stack",
    "where_const",
]


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.dtype(np.float32)
        _state.check_finite = True
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors and parameters are created with."""
    st = _st()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    st = _st()
    old = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = old


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            return data
        dtype = _st().dtype
    return np.asarray(data, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, Tensor)):
            dtype = _st().dtype
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        return tensor_op(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        return tensor_op(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return tensor_op(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

        return tensor_op(out, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return tensor_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return tensor_op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self
        out = x.data[idx]

        def bw(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g) if _has_fancy(idx) else _slice_add(gx, idx, g)
            return (gx,)

        return tensor_op(np.array(out, copy=True), (x,), bw, "getitem")

    # -- reductions / reshaping -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

        return tensor_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return tensor_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return tensor_op(
            np.ascontiguousarray(self.data.transpose(axes)), (self,),
            lambda g: (g.transpose(inv),), "transpose")

    # -- elementwise functions -------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return tensor_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)  # log(0) = -inf is a valid result here
        return tensor_op(out, (self,), lambda g: (g / x,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return tensor_op(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return tensor_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self):
        mask = self.data > 0
        return tensor_op(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
        return tensor_op(out, (self,), lambda g: (g * _sigmoid(x),), "softplus")

    def abs(self):
        s = np.sign(self.data)
        return tensor_op(np.abs(self.data), (self,), lambda g: (g * s,), "abs")


class Parameter(Tensor):
    """A named trainable leaf tensor.

    ``group`` selects the learning rate during end-to-end training: ``"new"``
    for freshly initialised networks, ``"pretrained"`` for loaded ones.
    """

    __slots__ = ("name", "group")

    GROUPS = ("new", "pretrained")

    def __init__(self, name: str, data, group: str = "new", requires_grad: bool = True):
        super().__init__(np.array(data, dtype=_st().dtype if not isinstance(data, np.ndarray)
                                  else data.dtype), requires_grad=requires_grad)
        if group not in self.GROUPS:
            raise ValueError(f"unknown learning-rate group {group!r}")
        self.name = name
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


# -- graph machinery -------------------------------------------------------

def tensor_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable,
              op: str = "op") -> Tensor:
    """Wrap a forward result and register its gradient closure.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per parent, each shaped like that parent.
    """
    st = _st()
    if st.check_finite and not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    on_stack: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            on_stack.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        on_stack.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                assert id(p) not in on_stack, "cycle in autodiff graph"
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Reverse-mode accumulation from a scalar root into leaf ``grad`` buffers.

    Repeated calls accumulate; clear gradients explicitly between steps.
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- helpers ---------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _has_fancy(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def _slice_add(gx: np.ndarray, idx, g: np.ndarray) -> None:
    gx[idx] += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return tensor_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
        "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return tensor_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return tensor_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def where_const(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` holds, constant ``fill`` elsewhere."""
    mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))
    return tensor_op(out, (x,), lambda g: (g * mask,), "where")


def parameters_of(objs: Iterable) -> list[Parameter]:
    return [p for o in objs for p in o.parameters()]
