"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the vector-Jacobian product. :func:`backward` walks the graph
in reverse topological order and accumulates gradients into the ``grad`` field
of every leaf created with ``requires_grad=True``.

All arithmetic is float64. Each operation checks its output for inf/NaN and
raises :class:`NonFiniteError` instead of letting it propagate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, EmptyReductionError, NonFiniteError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may participate in a differentiation graph.

    Values are read-only once created; only ``grad`` is mutated (by backward).
    Non-leaf tensors carry ``op`` (kind tag), ``parents`` and a backward closure
    holding whatever activations the rule needs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} created with non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # construction helper for op outputs; skips the copy done by __init__
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
        out = cls.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out.name = None
        if out.requires_grad:
            out.parents = parents
            out._backward = backward
        else:
            out.parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce(self, axis, "sum")

    def mean(self, axis: int | None = None) -> Tensor:
        return reduce(self, axis, "mean")

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_2d(t: Tensor) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"expected a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def _bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor._from_op(A @ B, "matmul", (a, b), _bw)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "scalar"
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return "row"
    raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.sum(axis=0).reshape(shape)


def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size == 1 and b.size != 1:
        return b, a, True
    return a, b, False


def add(a, b) -> Tensor:
    """Sum of equal-shaped tensors; ``b`` may also be a row bias or a scalar."""
    a, b, _ = _binary(a, b)
    kind = _broadcast_kind(a.data, b.data)
    bshape = b.shape

    def _bw(g):
        return (g, _reduce_to(g, kind, bshape) if b.requires_grad else None)

    return Tensor._from_op(a.data + (b.data.reshape(()) if kind == "scalar" else b.data), "add", (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def _bw(g):
        return (g, -g)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), _bw)


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a single-element tensor."""
    a, b, _ = _binary(a, b)
    kind = _broadcast_kind(a.data, b.data)
    if kind == "row":
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    Bv = B.reshape(()) if kind == "scalar" else B
    bshape = b.shape

    def _bw(g):
        ga = g * Bv if a.requires_grad else None
        gb = _reduce_to(g * A, kind, bshape) if b.requires_grad else None
        return (ga, gb)

    return Tensor._from_op(A * Bv, "mul", (a, b), _bw)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    c = float(c)

    def _bw(g):
        return (g * c,)

    return Tensor._from_op(t.data * c, "scale", (t,), _bw)


def shift(t: Tensor, c: float) -> Tensor:
    """Add a constant."""
    return Tensor._from_op(t.data + float(c), "shift", (t,), lambda g: (g,))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def _bw(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, t.data, 0.0), "relu", (t,), _bw)


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(t.data)

    def _bw(g):
        return (g * out,)

    return Tensor._from_op(out, "exp", (t,), _bw)


def log(t: Tensor) -> Tensor:
    if (t.data <= 0).any():
        raise DomainError("log of non-positive value")
    X = t.data

    def _bw(g):
        return (g / X,)

    return Tensor._from_op(np.log(X), "log", (t,), _bw)


def sqrt(t: Tensor) -> Tensor:
    if (t.data <= 0).any():
        raise DomainError("sqrt needs strictly positive input (derivative undefined at 0)")
    out = np.sqrt(t.data)

    def _bw(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, "sqrt", (t,), _bw)


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, exp, log, sqrt, scale (tensor, constant)."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "scale": scale}
    try:
        fn = table[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def row_scale(t: Tensor, weights: np.ndarray) -> Tensor:
    """Multiply row ``r`` of a 2-d tensor by the constant ``weights[r]``."""
    _require_2d(t)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != t.shape[0]:
        raise DimensionError(f"row_scale: {w.shape[0]} weights for {t.shape[0]} rows")

    def _bw(g):
        return (g * w,)

    return Tensor._from_op(t.data * w, "row_scale", (t,), _bw)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(parts)

    return Tensor._from_op(out, "concat", tuple(tensors), _bw)


def gather_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``t[index]``; the backward pass scatter-adds into repeated rows."""
    idx = np.asarray(index, dtype=np.int64)
    n = t.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")

    def _bw(g):
        return (_scatter_add(g, idx, n),)

    return Tensor._from_op(t.data[idx], "gather_rows", (t,), _bw)


def _scatter_add(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    if idx.size == 0:
        return out
    # sort + reduceat is much faster than np.add.at for wide rows
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

_REDUCERS = ("sum", "mean", "max", "min")


def _sequential_sum(X: np.ndarray, axis: int | None) -> np.ndarray:
    # storage-order summation, identical to what segment_aggregate does per segment
    if axis is None:
        return np.add.reduceat(X.reshape(-1), [0])[0]
    return np.add.reduceat(X, [0], axis=axis).squeeze(axis)


def reduce(t: Tensor, axis: int | None = None, kind: str = "sum") -> Tensor:
    """Reduce along ``axis`` (or everything when ``axis`` is None).

    max/min send the gradient to the first attaining element in storage order.
    """
    if kind not in _REDUCERS:
        raise ContractError(f"unknown reducer {kind!r}")
    X = t.data
    if axis is not None and not -X.ndim <= axis < X.ndim:
        raise ContractError(f"axis {axis} invalid for shape {t.shape}")
    n = X.size if axis is None else X.shape[axis]
    if n == 0:
        raise EmptyReductionError(f"{kind} over an empty axis of shape {t.shape}")
    shape = X.shape

    if kind == "sum":
        out = _sequential_sum(X, axis)

        def _bw(g):
            return (np.broadcast_to(g if axis is None else np.expand_dims(g, axis), shape).copy(),)

    elif kind == "mean":
        out = _sequential_sum(X, axis) / n

        def _bw(g):
            return (np.broadcast_to((g if axis is None else np.expand_dims(g, axis)) / n, shape).copy(),)

    else:
        arg = (np.argmax if kind == "max" else np.argmin)(X, axis=axis)
        out = np.take_along_axis(X, np.expand_dims(arg, axis), axis).squeeze(axis) if axis is not None else X.flat[arg]

        def _bw(g):
            grad = np.zeros(shape)
            if axis is None:
                grad.flat[arg] = g
            else:
                np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
            return (grad,)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), f"reduce_{kind}", (t,), _bw)


def softmax_rows(t: Tensor, row_mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction; masked-out entries are exactly 0."""
    _require_2d(t)
    X = t.data
    mask = np.ones(X.shape, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    if mask.shape != X.shape:
        raise DimensionError(f"row_mask shape {mask.shape} != tensor shape {X.shape}")
    if not mask.any(axis=1).all():
        raise EmptyReductionError("softmax over a fully masked row")
    shifted = np.where(mask, X, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    Y = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (Y * (g - (g * Y).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(Y, "softmax_rows", (t,), _bw)


def log_softmax_rows(t: Tensor) -> Tensor:
    _require_2d(t)
    X = t.data
    shifted = X - X.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    P = np.exp(out)

    def _bw(g):
        return (g - P * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, "log_softmax_rows", (t,), _bw)


# ---------------------------------------------------------------------------
# segment reductions
# ---------------------------------------------------------------------------

class SegmentIndex:
    """Precomputed grouping of rows by segment id, reusable across calls.

    Rows are stably sorted by segment so that within a segment the original
    storage order is kept; this fixes the summation order and the max/min
    tie-break.
    """

    def __init__(self, segment_ids: np.ndarray, num_segments: int):
        ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise IndexError(f"segment id out of range [0, {num_segments})")
        self.ids = ids
        self.num_segments = int(num_segments)
        self.order = np.argsort(ids, kind="stable")
        self.counts = np.bincount(ids, minlength=num_segments)
        self.empty = self.counts == 0
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.nonempty = np.flatnonzero(~self.empty)
        self.starts = starts[self.nonempty]

    def __len__(self) -> int:
        return self.ids.size


def segment_aggregate(values: Tensor, segment_ids, num_segments: int | None = None, kind: str = "sum"):
    """Reduce the rows of ``values`` per segment.

    Returns ``(out, empty)`` where ``out`` has one row per segment and ``empty``
    is a boolean mask of segments that received no rows (their row is zero).
    """
    if kind not in _REDUCERS:
        raise ContractError(f"unknown reducer {kind!r}")
    seg = segment_ids if isinstance(segment_ids, SegmentIndex) else SegmentIndex(segment_ids, num_segments)
    if num_segments is not None and seg.num_segments != num_segments:
        raise ContractError("num_segments disagrees with the SegmentIndex")
    X = values.data
    if X.ndim != 2 or X.shape[0] != len(seg):
        raise DimensionError(f"segment_aggregate: values {X.shape} for {len(seg)} segment ids")
    S, d = seg.num_segments, X.shape[1]
    out = np.zeros((S, d))
    if len(seg) == 0:
        return Tensor._from_op(out, f"segment_{kind}", (values,), lambda g: (np.zeros_like(X),)), seg.empty.copy()

    sorted_vals = X[seg.order]
    ne, starts, ids = seg.nonempty, seg.starts, seg.ids
    if kind in ("sum", "mean"):
        out[ne] = np.add.reduceat(sorted_vals, starts, axis=0)
        if kind == "mean":
            out[ne] /= seg.counts[ne, None]
            inv = 1.0 / seg.counts[ids][:, None]

            def _bw(g):
                return (g[ids] * inv,)
        else:
            def _bw(g):
                return (g[ids],)
    else:
        red = np.maximum if kind == "max" else np.minimum
        out[ne] = red.reduceat(sorted_vals, starts, axis=0)
        # first attaining row per (segment, column), in storage order
        E = sorted_vals.shape[0]
        seg_rank = np.repeat(np.arange(ne.size), seg.counts[ne])
        hit = sorted_vals == out[ne][seg_rank]
        pos = np.where(hit, np.arange(E)[:, None], E)
        first = np.minimum.reduceat(pos, starts, axis=0)
        rows = seg.order[first]
        cols = np.broadcast_to(np.arange(d), rows.shape)

        def _bw(g):
            grad = np.zeros_like(X)
            grad[rows, cols] = g[ne]
            return (grad,)

    return Tensor._from_op(out, f"segment_{kind}", (values,), _bw), seg.empty.copy()


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling this twice without clearing the leaves' ``grad`` adds the second
    gradient on top of the first. Returns ``{leaf: leaf.grad}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
