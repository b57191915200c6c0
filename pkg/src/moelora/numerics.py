"""Dense 2-D tensors with a reverse-mode differentiation tape.

Every differentiable computation in the package is assembled from the
primitives in this module. A primitive computes its forward value with numpy
and, when a :class:`Tape` is active and one of its inputs is tracked, appends a
node holding the local gradient rule. :func:`backward` replays the nodes in
reverse order.

    >>> w = Tensor2D.from_rows([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(w)
    >>> backward(loss, tape)[w].tolist()
    [[1.0, 1.0], [1.0, 1.0]]
"""

from __future__ import annotations

import itertools
import zlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ParameterError",
    "TapeError",
    "Tensor2D",
    "Tape",
    "Gradients",
    "SeededRng",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_col",
    "div_col",
    "reduce_sum",
    "reduce_mean",
    "softmax_rows",
    "logsumexp_rows",
    "l2_normalize_rows",
    "log",
    "exp",
    "tanh",
    "gather_rows",
    "scatter_rows",
    "take_cols",
    "concat_rows",
    "dropout",
    "backward",
    "numerical_gradient",
    "relative_error",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


class TapeError(RuntimeError):
    """The tape cannot satisfy a backward request."""


_ids = itertools.count()


class Tensor2D:
    """Row-major matrix of float64 values.

    The wrapped array is treated as immutable: operations always return new
    tensors, and optimizers rebind ``data`` rather than writing into it.
    """

    __slots__ = ("data", "id", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor2D needs at most 2 dimensions, got shape {arr.shape}")
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], **kwargs) -> Tensor2D:
        return cls(np.asarray(rows, dtype=np.float64), **kwargs)

    @classmethod
    def zeros(cls, rows: int, cols: int, **kwargs) -> Tensor2D:
        return cls(np.zeros((rows, cols)), **kwargs)

    @classmethod
    def identity(cls, n: int, **kwargs) -> Tensor2D:
        return cls(np.eye(n), **kwargs)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor2D:
        # internal fast path; ``arr`` is a freshly computed float64 2-D array
        t = cls.__new__(cls)
        t.data = arr
        t.id = next(_ids)
        t.requires_grad = False
        t.name = None
        return t

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def tolist(self) -> list[list[float]]:
        return self.data.tolist()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor2D:
        return Tensor2D._wrap(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor2D({self.rows}x{self.cols}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor2D) -> Tensor2D:
        return add(self, other)

    def __sub__(self, other: Tensor2D) -> Tensor2D:
        return sub(self, other)

    def __mul__(self, other: Tensor2D | float) -> Tensor2D:
        if isinstance(other, Tensor2D):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor2D:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor2D) -> Tensor2D:
        return matmul(self, other)


GradRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out_id: int
    inputs: tuple[Tensor2D, ...]
    rule: GradRule


_active_tape: ContextVar["Tape | None"] = ContextVar("moelora_active_tape", default=None)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; primitives evaluated inside the block are
    recorded when at least one input is tracked. A tensor is tracked when it
    has ``requires_grad`` set or was produced by a node on this tape.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.gradients: Gradients = Gradients()
        self._live: set[int] = set()
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def tracks(self, t: Tensor2D) -> bool:
        return t.requires_grad or t.id in self._live

    def record(self, out: Tensor2D, inputs: tuple[Tensor2D, ...], rule: GradRule) -> None:
        self.nodes.append(_Node(out.id, inputs, rule))
        self._live.add(out.id)

    def reset(self) -> None:
        self.nodes.clear()
        self._live.clear()


def _record(out: Tensor2D, inputs: Sequence[Tensor2D], *rules: Callable[[np.ndarray], np.ndarray]) -> Tensor2D:
    """Record ``out`` on the active tape; ``rules[i]`` maps d(out) to d(inputs[i])."""
    tape = _active_tape.get()
    if tape is None:
        return out
    needed = [tape.tracks(t) for t in inputs]
    if not any(needed):
        return out
    tape.record(out, tuple(inputs), lambda g: [r(g) if n else None for r, n in zip(rules, needed)])
    return out


class Gradients(dict):
    """Mapping from tensor id to gradient; also indexable by the tensor itself."""

    @staticmethod
    def _key(k):
        return k.id if isinstance(k, Tensor2D) else k

    def __getitem__(self, k) -> Tensor2D:
        return super().__getitem__(self._key(k))

    def __contains__(self, k) -> bool:
        return super().__contains__(self._key(k))

    def get(self, k, default=None):
        return super().get(self._key(k), default)


def backward(loss: Tensor2D, tape: Tape | None = None) -> Gradients:
    """Propagate d(loss)/d(.) through ``tape`` and return the gradient map.

    The tape is cleared afterwards, so a second call on the same history
    raises :class:`TapeError`.
    """
    if tape is None:
        tape = _active_tape.get()
        if tape is None:
            raise TapeError("backward() called with no tape")
    if loss.shape != (1, 1):
        raise DimensionError(f"loss must be 1x1, got {loss.shape}")
    if loss.id not in tape._live:
        raise TapeError("tape holds no history for this loss (already consumed by a previous backward?)")

    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not tape.tracks(inp):
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    tape.gradients = Gradients((k, Tensor2D._wrap(np.asarray(v, dtype=np.float64))) for k, v in grads.items())
    tape.reset()
    return tape.gradients


class SeededRng:
    """Reproducible random stream built on numpy's PCG64."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def derive(cls, seed: int, *keys: str | int) -> SeededRng:
        """Independent stream for ``(seed, *keys)``; stable across processes."""
        words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
        for k in keys:
            words.append(zlib.crc32(str(k).encode()))
        rng = cls.__new__(cls)
        rng.seed = int(seed)
        rng.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
        return rng

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=(rows, cols))

    def random(self, rows: int, cols: int) -> np.ndarray:
        return self.generator.random((rows, cols))

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self.generator.integers(low, high, size=size)


def _check_same(op: str, a: Tensor2D, b: Tensor2D) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_col(op: str, a: Tensor2D, col: Tensor2D) -> None:
    if col.shape != (a.rows, 1):
        raise DimensionError(f"{op}: column operand {col.shape} does not match {a.shape}")


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data
    out = Tensor2D._wrap(A @ B)
    return _record(out, (a, b), lambda g: g @ B.T, lambda g: A.T @ g)


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same("add", a, b)
    out = Tensor2D._wrap(a.data + b.data)
    return _record(out, (a, b), lambda g: g, lambda g: g)


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same("sub", a, b)
    out = Tensor2D._wrap(a.data - b.data)
    return _record(out, (a, b), lambda g: g, lambda g: -g)


def mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    out = Tensor2D._wrap(A * B)
    return _record(out, (a, b), lambda g: g * B, lambda g: g * A)


def scale(a: Tensor2D, c: float) -> Tensor2D:
    c = float(c)
    out = Tensor2D._wrap(a.data * c)
    return _record(out, (a,), lambda g: g * c)


def mul_col(a: Tensor2D, col: Tensor2D) -> Tensor2D:
    """Multiply row ``t`` of ``a`` by ``col[t, 0]``."""
    _check_col("mul_col", a, col)
    A, C = a.data, col.data
    out = Tensor2D._wrap(A * C)
    return _record(out, (a, col), lambda g: g * C, lambda g: (g * A).sum(axis=1, keepdims=True))


def div_col(a: Tensor2D, col: Tensor2D) -> Tensor2D:
    """Divide row ``t`` of ``a`` by ``col[t, 0]``."""
    _check_col("div_col", a, col)
    A, C = a.data, col.data
    Y = A / C
    out = Tensor2D._wrap(Y)
    return _record(out, (a, col), lambda g: g / C, lambda g: -(g * Y).sum(axis=1, keepdims=True) / C)


def reduce_sum(a: Tensor2D, axis: int | None = None) -> Tensor2D:
    """Sum of all entries (1x1), of each column (axis=0, 1xC) or of each row (axis=1, Rx1)."""
    shape = a.shape
    if axis is None:
        out = Tensor2D._wrap(np.array([[a.data.sum()]]))
    elif axis in (0, 1):
        out = Tensor2D._wrap(a.data.sum(axis=axis, keepdims=True))
    else:
        raise DimensionError(f"reduce_sum: axis must be None, 0 or 1, got {axis}")
    return _record(out, (a,), lambda g: np.broadcast_to(g, shape).copy())


def reduce_mean(a: Tensor2D, axis: int | None = None) -> Tensor2D:
    if axis is None:
        count = a.rows * a.cols
    elif axis in (0, 1):
        count = a.shape[axis]
    else:
        raise DimensionError(f"reduce_mean: axis must be None, 0 or 1, got {axis}")
    if count == 0:
        raise DimensionError(f"reduce_mean over an empty extent of {a.shape}")
    return scale(reduce_sum(a, axis), 1.0 / count)


def softmax_rows(a: Tensor2D) -> Tensor2D:
    E = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    S = E / E.sum(axis=1, keepdims=True)
    out = Tensor2D._wrap(S)
    return _record(out, (a,), lambda g: S * (g - (g * S).sum(axis=1, keepdims=True)))


def logsumexp_rows(a: Tensor2D) -> Tensor2D:
    """``log(sum(exp(row)))`` per row, as an ``R x 1`` column."""
    m = a.data.max(axis=1, keepdims=True)
    S = a.data - m
    np.exp(S, out=S)
    total = S.sum(axis=1, keepdims=True)
    out = Tensor2D._wrap(m + np.log(total))
    S /= total

    def rule(g: np.ndarray) -> np.ndarray:
        # a tape is consumed once, so the cached softmax can take the product in place
        return np.multiply(S, g, out=S)

    return _record(out, (a,), rule)


def l2_normalize_rows(a: Tensor2D) -> Tensor2D:
    """Scale each row to unit L2 norm. Rows must be non-zero."""
    X = a.data
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ParameterError("l2_normalize_rows: zero-norm row")
    Y = X / norms
    out = Tensor2D._wrap(Y)
    return _record(out, (a,), lambda g: (g - Y * (g * Y).sum(axis=1, keepdims=True)) / norms)


def log(a: Tensor2D) -> Tensor2D:
    X = a.data
    out = Tensor2D._wrap(np.log(X))
    return _record(out, (a,), lambda g: g / X)


def exp(a: Tensor2D) -> Tensor2D:
    E = np.exp(a.data)
    out = Tensor2D._wrap(E)
    return _record(out, (a,), lambda g: g * E)


def tanh(a: Tensor2D) -> Tensor2D:
    Y = np.tanh(a.data)
    out = Tensor2D._wrap(Y)
    return _record(out, (a,), lambda g: g * (1.0 - Y * Y))


def _as_index(index: Iterable[int]) -> np.ndarray:
    if isinstance(index, np.ndarray):
        return index.astype(np.intp, copy=False).ravel()
    return np.fromiter(index, dtype=np.intp)


def gather_rows(a: Tensor2D, index: Iterable[int]) -> Tensor2D:
    """Rows ``a[index[0]], a[index[1]], ...``; repeated indices are allowed."""
    idx = _as_index(index)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise DimensionError(f"gather_rows: index out of range for {a.shape}")
    rows = a.rows
    out = Tensor2D._wrap(a.data[idx].reshape(idx.size, a.cols))

    def rule(g):
        da = np.zeros((rows, g.shape[1]))
        np.add.at(da, idx, g)
        return da

    return _record(out, (a,), rule)


def scatter_rows(a: Tensor2D, index: Iterable[int], rows: int) -> Tensor2D:
    """A ``rows x a.cols`` zero matrix with row ``a[j]`` added at ``index[j]``."""
    idx = _as_index(index)
    if idx.size != a.rows:
        raise DimensionError(f"scatter_rows: {idx.size} indices for {a.rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DimensionError(f"scatter_rows: index out of range for {rows} rows")
    Y = np.zeros((rows, a.cols))
    np.add.at(Y, idx, a.data)
    out = Tensor2D._wrap(Y)
    return _record(out, (a,), lambda g: g[idx])


def take_cols(a: Tensor2D, index: Iterable[int]) -> Tensor2D:
    idx = _as_index(index)
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise DimensionError(f"take_cols: index out of range for {a.shape}")
    cols = a.cols
    out = Tensor2D._wrap(a.data[:, idx].reshape(a.rows, idx.size))

    def rule(g):
        da = np.zeros((g.shape[0], cols))
        np.add.at(da.T, idx, g.T)
        return da

    return _record(out, (a,), rule)


def concat_rows(parts: Sequence[Tensor2D]) -> Tensor2D:
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(f"concat_rows: column mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.rows for p in parts])
    out = Tensor2D._wrap(np.concatenate([p.data for p in parts], axis=0))
    rules = [(lambda g, lo=bounds[i], hi=bounds[i + 1]: g[lo:hi]) for i in range(len(parts))]
    return _record(out, parts, *rules)


def dropout(a: Tensor2D, p: float, rng: SeededRng | None, training: bool) -> Tensor2D:
    """Inverted dropout: zero entries with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    mask = (rng.random(a.rows, a.cols) >= p) / (1.0 - p)
    out = Tensor2D._wrap(a.data * mask)
    return _record(out, (a,), lambda g: g * mask)


def numerical_gradient(f: Callable[[], "float | Tensor2D"], t: Tensor2D, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to every entry of ``t``.

    ``f`` may return a float or a 1x1 tensor.
    """
    def value() -> float:
        v = f()
        return v.item() if isinstance(v, Tensor2D) else float(v)

    base = t.data
    grad = np.zeros_like(base)
    for i, j in np.ndindex(*base.shape):
        plus = base.copy()
        plus[i, j] += h
        t.data = plus
        fp = value()
        minus = base.copy()
        minus[i, j] -= h
        t.data = minus
        fm = value()
        grad[i, j] = (fp - fm) / (2.0 * h)
    t.data = base
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denom
