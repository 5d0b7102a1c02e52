"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` records the operation that produced it. Calling
:func:`backward` on a scalar tensor walks the recorded graph in reverse
topological order and leaves ``d root / d node`` in ``node.grad`` for every
node that depends on a leaf created with ``requires_grad=True``.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
to the operand shape.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matvec",
    "inner",
    "sum",
    "mean",
    "reshape",
    "concat",
    "take",
    "exp",
    "softplus",
    "leaky_relu",
    "clamp",
    "max_reduce",
    "logsumexp",
    "group_max",
    "stop_gradient",
    "backward",
    "numerical_grad",
    "relative_error",
]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _node(av * bv, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def softplus(a) -> Tensor:
    """``log(1 + e^a)`` computed without overflow for large ``|a|``."""
    a = as_tensor(a)
    v = a.value
    out = np.logaddexp(0.0, v)

    def vjp(g):
        # sigmoid, stable for both signs
        s = np.exp(-np.logaddexp(0.0, -v))
        return (g * s,)

    return _node(out, (a,), vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    v = a.value
    d = np.where(v > 0, 1.0, slope)
    return _node(v * d, (a,), lambda g: (g * d,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into ``[lo, hi]``; subgradient is 1 on the closed interval, 0 outside."""
    a = as_tensor(a)
    v = a.value
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = ((v >= lo_) & (v <= hi_)).astype(np.float64)
    return _node(np.clip(v, lo_, hi_), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matvec(W, x) -> Tensor:
    """Apply ``W`` to the last axis of ``x``.

    ``W`` of shape ``(h, d)`` is shared across the batch; ``W`` of shape
    ``(B, h, d)`` holds one matrix per row of ``x`` (``x`` of shape ``(B, d)``).
    """
    W, x = as_tensor(W), as_tensor(x)
    Wv, xv = W.value, x.value
    if Wv.ndim == 2:
        if xv.shape[-1] != Wv.shape[1]:
            raise ValueError(f"matvec: shape mismatch {Wv.shape} @ {xv.shape}")
        out = xv @ Wv.T

        def vjp(g):
            g2 = g.reshape(-1, Wv.shape[0])
            x2 = xv.reshape(-1, Wv.shape[1])
            return g2.T @ x2, g @ Wv

        return _node(out, (W, x), vjp)
    if Wv.ndim == 3:
        if xv.ndim != 2 or xv.shape[0] != Wv.shape[0] or xv.shape[1] != Wv.shape[2]:
            raise ValueError(f"matvec: shape mismatch {Wv.shape} @ {xv.shape}")
        out = np.einsum("bij,bj->bi", Wv, xv)

        def vjp(g):
            return g[:, :, None] * xv[:, None, :], np.einsum("bij,bi->bj", Wv, g)

        return _node(out, (W, x), vjp)
    raise ValueError(f"matvec: W must be 2-D or 3-D, got {Wv.shape}")


def inner(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"inner: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = np.sum(av * bv, axis=-1)

    def vjp(g):
        ge = np.asarray(g)[..., None]
        return _unbroadcast(ge * bv, av.shape), _unbroadcast(ge * av, bv.shape)

    return _node(out, (a, b), vjp)


def sum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), vjp)


def max_reduce(a, axis: int = -1) -> Tensor:
    """Hard max along ``axis``; the adjoint goes to the lowest-index maximiser."""
    a = as_tensor(a)
    v = a.value
    idx = np.expand_dims(np.argmax(v, axis=axis), axis)
    out = np.take_along_axis(v, idx, axis=axis).squeeze(axis)

    def vjp(g):
        gi = np.zeros_like(v)
        np.put_along_axis(gi, idx, np.expand_dims(g, axis), axis=axis)
        return (gi,)

    return _node(out, (a,), vjp)


def logsumexp(a, axis: int = -1, beta: float = 1.0) -> Tensor:
    """``(1/beta) * log(sum(exp(beta * a)))`` along ``axis`` with a max shift."""
    a = as_tensor(a)
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(beta * (v - m))
    s = np.sum(e, axis=axis, keepdims=True)
    out = (m + np.log(s) / beta).squeeze(axis)
    w = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _node(out, (a,), vjp)


def group_max(h, groups: int, soft_beta: float = np.inf) -> Tensor:
    """Split the last axis into ``groups`` equal groups and reduce each by max.

    With finite ``soft_beta`` the max is replaced by the log-sum-exp smooth
    maximum at inverse temperature ``soft_beta``.
    """
    h = as_tensor(h)
    width = h.shape[-1]
    if groups < 1 or width == 0 or width % groups:
        raise ValueError(f"group_max: width {width} not divisible into {groups} non-empty groups")
    hg = reshape(h, h.shape[:-1] + (groups, width // groups))
    if np.isinf(soft_beta):
        return max_reduce(hg, axis=-1)
    return logsumexp(hg, axis=-1, beta=soft_beta)


def stop_gradient(a) -> Tensor:
    """Same value, no adjoint flow."""
    a = as_tensor(a)
    return Tensor(a.value.copy())


# ---------------------------------------------------------------------------
# backward pass


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Reverse accumulation from a scalar ``root``.

    Adjoints of every node reachable from ``root`` are reset first, so
    repeated calls on the same graph give identical results.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g.copy() if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered named parameter leaves; the flat concatenation is ``theta``."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._frozen = False

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if self._frozen:
            raise RuntimeError("parameter set is frozen")
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def freeze(self) -> None:
        self._frozen = True

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def size(self) -> int:
        return int(np.sum([p.value.size for p in self._params.values()]))

    def grads(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict(
            (k, np.zeros_like(p.value) if p.grad is None else p.grad.copy())
            for k, p in self._params.items()
        )

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def values(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.value.copy()) for k, p in self._params.items())

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(values)
        if missing:
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in self._params.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = v.copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self._params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads().values()])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.size:
            raise ValueError(f"expected {self.size} values, got {theta.size}")
        i = 0
        for p in self._params.values():
            n = p.value.size
            p.value = theta[i : i + n].reshape(p.value.shape).copy()
            i += n


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(
    f: Callable[[], float],
    store: ParamStore,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. the flat parameter vector.

    Only ``coords`` are perturbed when given; other entries are NaN.
    """
    theta = store.flat()
    out = np.full(theta.size, np.nan)
    idx = range(theta.size) if coords is None else coords
    try:
        for i in idx:
            tp = theta.copy()
            tp[i] += h
            store.set_flat(tp)
            fp = float(f())
            tp[i] -= 2 * h
            store.set_flat(tp)
            fm = float(f())
            out[i] = (fp - fm) / (2 * h)
    finally:
        store.set_flat(theta)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the gradient's infinity norm."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    diff = np.max(np.abs(analytic[mask] - numeric[mask]))
    scale_ = max(np.max(np.abs(numeric[mask])), np.max(np.abs(analytic[mask])), 1e-12)
    return float(diff / scale_)
