"""A small dense tensor with reverse-mode automatic differentiation.

Storage is a numpy array. Training runs in float32; gradient checks build the
same graphs from float64 inputs, and every op preserves its input dtype.

Elementwise binary ops accept two tensors of equal shape, or a tensor and a
scalar (a 0-d or single-element tensor, or a Python number). Row-wise
broadcasting is only available through the dedicated ops (``add_bias``,
``l2_normalize``, ``pairwise_sq_dist``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; results never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``.

        The graph is kept, so calling this twice adds the same gradients twice.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

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

        grads: dict[int, Array] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: Array, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_to(g: Array, t: Tensor) -> Array:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no gradient to ``c``)."""
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    s = a.dtype.type(slope)
    factor = np.where(a.data > 0, a.dtype.type(1), s)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "log": log,
    "neg": neg,
    "scale": scale,
}


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **kwargs)


# -- linear algebra and structure ----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_rows(a: Tensor, index) -> Tensor:
    """Rows of a matrix selected by an index array or slice."""
    if isinstance(index, slice):
        def back(g):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)
        return _make(a.data[index], (a,), back, "take_rows")

    idx = np.asarray(index, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, j] + b[j]`` for a matrix ``x`` and vector ``b``."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


# -- reductions ------------------------------------------------------------


def _check_axis(a: Tensor, axis: int | None) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    _check_axis(a, axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    inv = a.dtype.type(1.0 / n)

    def back(g):
        if axis is None:
            return (np.full(a.shape, g * inv, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), back, "mean")


def max(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; ties share the gradient equally."""
    _check_axis(a, axis)
    out = np.asarray(a.data.max(axis=axis))

    def back(g):
        kept = out if axis is None else np.expand_dims(out, axis)
        gk = g if axis is None else np.expand_dims(g, axis)
        mask = (a.data == kept).astype(a.dtype)
        count = mask.sum() if axis is None else mask.sum(axis=axis, keepdims=True)
        return (mask * gk / count,)

    return _make(out, (a,), back, "max")


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(a, axis)


# -- metric pieces ---------------------------------------------------------


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows divided by their Euclidean norm (plus ``eps``)."""
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize needs a matrix, got {x.shape}")
    r = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = r + x.dtype.type(eps)
    y = x.data / denom
    r_safe = np.where(r > 0, r, 1).astype(x.dtype)

    def back(g):
        gx = (g * x.data).sum(axis=1, keepdims=True)
        return (g / denom - x.data * gx / (r_safe * denom * denom),)

    return _make(y, (x,), back, "l2_normalize")


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """``out[i, j] = ||a[i] - b[j]||^2``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sq_dist: incompatible {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def back(g):
        two = a.dtype.type(2)
        ga = two * (g.sum(axis=1, keepdims=True) * a.data - g @ b.data)
        gb = two * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _make(out, (a, b), back, "pairwise_sq_dist")


def softmax(logits: Array) -> Array:
    """Row softmax of a plain array, stabilized by row-max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    n_rows, n_cls = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise IndexError(f"label out of range [0, {n_cls}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n_rows)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def back(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1
        return (p * (g / logits.dtype.type(n_rows)),)

    return _make(loss, (logits,), back, "softmax_cross_entropy")
