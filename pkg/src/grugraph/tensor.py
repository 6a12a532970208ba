"""Dense float64 matrices with reverse-mode automatic differentiation.

Every value is a 2-D matrix; scalars are 1x1. Operations record their inputs and a
backward rule on the output tensor, and :func:`backward` walks the recorded graph
in reverse topological order. A graph can be traversed once: afterwards its
interior nodes are released and a second traversal raises :class:`StateError`.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DimensionError, EmptyBatchError, GraphIndexError, LabelError, NumericError, StateError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A 2-D float64 matrix that can take part in gradient computation."""

    __slots__ = ("__weakref__", "_backward", "_consumed", "_parents", "data", "grad", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got an array of shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# tape


@dataclass
class ComputationTape:
    """Operations reachable from a loss, inputs before outputs."""

    nodes: list[Tensor]

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(loss: Tensor) -> ComputationTape:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._consumed:
            raise StateError("computation graph was already traversed by backward(); run a new forward pass")
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return ComputationTape(order)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor the scalar ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, so several losses can be
    backpropagated into the same parameters before an optimizer step.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
    if loss._consumed:
        raise StateError("backward() already ran on this graph")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for node in tape.nodes:
        if node._parents:
            node._consumed = True
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._result(ad @ bd, (a, b), _bw, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    return g.sum(axis=0, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return
    if (sa[0] == 1 and sa[1] == sb[1]) or (sb[0] == 1 and sa[1] == sb[1]):
        return
    raise DimensionError(f"{op} shape mismatch: {sa} vs {sb} (only row or scalar broadcasting)")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), _bw, "mul")


def relu(a: Tensor) -> Tensor:
    # Gradient at exactly 0 is 0.
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    slopes = np.where(mask, 1.0, slope)
    return Tensor._result(a.data * slopes, (a,), lambda g: (g * slopes,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "leaky_relu": leaky_relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op in _BINARY:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and indexing


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(a.data.sum().reshape(1, 1), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def row_sum(a: Tensor) -> Tensor:
    cols = a.cols
    return Tensor._result(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, cols, axis=1),), "row_sum")


def scale_rows(a: Tensor, coeff: Tensor) -> Tensor:
    """Multiply row ``i`` of ``a`` by ``coeff[i, 0]``."""
    coeff = _as_tensor(coeff)
    if coeff.shape != (a.rows, 1):
        raise DimensionError(f"scale_rows needs a ({a.rows}, 1) coefficient column, got {coeff.shape}")
    ad, cd = a.data, coeff.data

    def _bw(g):
        return (
            g * cd if a.requires_grad else None,
            (g * ad).sum(axis=1, keepdims=True) if coeff.requires_grad else None,
        )

    return Tensor._result(ad * cd, (a, coeff), _bw, "scale_rows")


def _index_array(idx, bound: int, what: str) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise GraphIndexError(f"{what} index out of range [0, {bound})")
    return arr


def _scatter_rows(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    if idx.size == 0:
        return np.zeros((n, values.shape[1]))
    incidence = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    return np.asarray(incidence @ values)


def gather_rows(a: Tensor, idx) -> Tensor:
    ix = _index_array(idx, a.rows, "gather_rows")
    n = a.rows
    return Tensor._result(a.data[ix], (a,), lambda g: (_scatter_rows(g, ix, n),), "gather_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    cols = {t.cols for t in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows needs equal column counts, got {sorted(cols)}")
    bounds = np.cumsum([0] + [t.rows for t in parts])

    def _bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor._result(np.vstack([t.data for t in parts]), parts, _bw, "concat_rows")


def scatter_aggregate(messages: Tensor, targets, p: int, mode: str = "sum") -> Tensor:
    """Aggregate message rows into ``p`` node rows by target index."""
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    ix = _index_array(targets, p, "scatter_aggregate target")
    if ix.size != messages.rows:
        raise DimensionError(f"{messages.rows} messages but {ix.size} targets")
    if mode == "sum":
        out = _scatter_rows(messages.data, ix, p)
        return Tensor._result(out, (messages,), lambda g: (g[ix],), "scatter_sum")
    counts = np.bincount(ix, minlength=p).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)[:, None]
    out = _scatter_rows(messages.data, ix, p) * inv
    return Tensor._result(out, (messages,), lambda g: ((g * inv)[ix],), "scatter_mean")


def segment_softmax(scores: Tensor, groups, n_groups: int) -> Tensor:
    """Softmax of a score column within each group of rows."""
    if scores.cols != 1:
        raise DimensionError(f"segment_softmax expects a column, got {scores.shape}")
    gi = _index_array(groups, n_groups, "segment_softmax group")
    s = scores.data[:, 0]
    gmax = np.full(n_groups, -np.inf)
    np.maximum.at(gmax, gi, s)
    e = np.exp(s - gmax[gi])
    denom = np.bincount(gi, weights=e, minlength=n_groups)
    alpha = (e / denom[gi])[:, None]

    def _bw(g):
        weighted = np.bincount(gi, weights=(alpha * g)[:, 0], minlength=n_groups)
        return (alpha * (g - weighted[gi][:, None]),)

    return Tensor._result(alpha, (scores,), _bw, "segment_softmax")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over the rows selected by ``mask``."""
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise LabelError(f"{y.size} labels for {n} logit rows")
    sel = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if sel.size != n:
        raise DimensionError(f"mask has {sel.size} entries for {n} rows")
    rows = np.flatnonzero(sel)
    if rows.size == 0:
        raise EmptyBatchError("cross-entropy over an empty selection")
    ys = y[rows]
    if ys.min() < 0 or ys.max() >= k:
        raise LabelError(f"label out of range [0, {k})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(rows.size), ys])
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(rows.size), ys] -= 1.0
    probs /= rows.size

    def _bw(g):
        full = np.zeros((n, k))
        full[rows] = probs * g[0, 0]
        return (full,)

    return Tensor._result(np.array([[loss]]), (logits,), _bw, "softmax_cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of a logit column against 0/1 targets."""
    if logits.cols != 1:
        raise DimensionError(f"bce_with_logits expects a column, got {logits.shape}")
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if t.shape[0] != logits.rows:
        raise LabelError(f"{t.shape[0]} targets for {logits.rows} logits")
    if t.shape[0] == 0:
        raise EmptyBatchError("binary cross-entropy over an empty batch")
    x = logits.data
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))
    s = _sigmoid(x)
    n = x.shape[0]
    return Tensor._result(np.array([[loss]]), (logits,), lambda g: ((s - t) * (g[0, 0] / n),), "bce_with_logits")


# ---------------------------------------------------------------------------


def norms(t) -> tuple[float, float]:
    """Manhattan and Euclidean norms over all entries."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return float(np.abs(arr).sum()), float(np.sqrt(np.square(arr).sum()))


def global_norms(arrays: Iterable[np.ndarray]) -> tuple[float, float]:
    l1 = 0.0
    sq = 0.0
    for a in arrays:
        l1 += float(np.abs(a).sum())
        sq += float(np.square(a).sum())
    return l1, float(np.sqrt(sq))
