"""Auxiliary routing objectives: load balancing and the experts contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moelora.adapters import DispatchResult
from moelora.numerics import (
    DimensionError,
    ParameterError,
    Tensor2D,
    concat_rows,
    gather_rows,
    _active_tape,
    _record,
    add,
    l2_normalize_rows,
    mul,
    reduce_mean,
    reduce_sum,
    scale,
    sub,
)

__all__ = [
    "AuxLossConfig",
    "ExpertQueue",
    "load_balance_loss",
    "update_queues",
    "experts_contrastive_loss",
    "auxiliary_loss",
    "expert_separation_score",
    "mse_loss",
]


@dataclass(frozen=True)
class AuxLossConfig:
    alpha: float = 0.01
    beta: float = 0.01
    tau: float = 0.07
    queue_capacity: int = 256

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.queue_capacity < 1:
            raise ParameterError(f"queue_capacity must be positive, got {self.queue_capacity}")


class ExpertQueue:
    """Fixed-capacity FIFO of detached expert output vectors.

    Zero vectors are never stored. With ``normalize`` on, rows are scaled to
    unit length on insertion.
    """

    def __init__(self, capacity: int, normalize: bool = True):
        if capacity < 1:
            raise ParameterError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.normalize = normalize
        self._buf: np.ndarray | None = None
        self._next = 0
        self._size = 0
        self._ordered: np.ndarray | None = None

    def __len__(self) -> int:
        return self._size

    def push(self, rows: np.ndarray | Tensor2D) -> None:
        arr = rows.data if isinstance(rows, Tensor2D) else np.asarray(rows, dtype=np.float64)
        arr = np.atleast_2d(arr)
        norms = np.linalg.norm(arr, axis=1)
        keep = norms > 0
        if not keep.any():
            return
        arr = arr[keep] / norms[keep, None] if self.normalize else arr[keep].copy()
        if self._buf is None:
            self._buf = np.zeros((self.capacity, arr.shape[1]))
        elif arr.shape[1] != self._buf.shape[1]:
            raise DimensionError(f"queue holds {self._buf.shape[1]}-d vectors, got {arr.shape[1]}-d")
        arr = arr[-self.capacity :]
        m = len(arr)
        pos = (self._next + np.arange(m)) % self.capacity
        self._buf[pos] = arr
        self._next = (self._next + m) % self.capacity
        self._size = min(self.capacity, self._size + m)
        self._ordered = None

    def entries(self) -> np.ndarray:
        """Stored vectors, oldest first, as a ``len x d`` array (``0 x 0`` when empty)."""
        if self._size == 0:
            return np.zeros((0, 0))
        if self._ordered is None:
            if self._size < self.capacity:
                self._ordered = self._buf[: self._size].copy()
            else:
                self._ordered = np.concatenate([self._buf[self._next :], self._buf[: self._next]])
        return self._ordered

    def clear(self) -> None:
        self._buf = None
        self._next = self._size = 0
        self._ordered = None


def load_balance_loss(
    gate_probs: Tensor2D, assignments: DispatchResult, count_topk: bool = False
) -> Tensor2D:
    """``n * sum_i f_i * P_i`` with ``f`` the top-1 token share and ``P`` the mean gate probability.

    ``f`` is a constant; the gradient reaches the gate through ``P`` only.
    With ``count_topk`` the token share counts every top-k slot instead of
    the argmax alone (normalized by ``T * k``).
    """
    T, n = gate_probs.shape
    if T == 0:
        raise DimensionError("load_balance_loss: empty batch")
    if count_topk:
        counts = np.array([len(t) for t in assignments.per_expert_tokens], dtype=np.float64)
        f = counts / (T * assignments.top_k)
    else:
        f = np.bincount(assignments.selected[:, 0], minlength=n).astype(np.float64) / T
    # mean taken around the first row: exact when every row is the same (e.g. a uniform gate)
    shift = gate_probs.data[:1]
    P = add(reduce_mean(sub(gate_probs, Tensor2D._wrap(np.repeat(shift, T, axis=0))), axis=0), Tensor2D._wrap(shift.copy()))
    return reduce_sum(mul(P, Tensor2D._wrap(n * f.reshape(1, n))))


def update_queues(
    queues: Sequence[ExpertQueue],
    expert_outputs: Sequence[Tensor2D | None],
    assignments: DispatchResult,
) -> None:
    """Push each expert's current output rows (detached) into that expert's queue."""
    if len(queues) != len(assignments.per_expert_tokens):
        raise DimensionError(f"{len(queues)} queues for {len(assignments.per_expert_tokens)} experts")
    for i, (queue, out) in enumerate(zip(queues, expert_outputs)):
        expected = len(assignments.per_expert_tokens[i])
        got = 0 if out is None else out.rows
        if got != expected:
            raise DimensionError(f"expert {i}: {got} output rows for {expected} routed tokens")
        if out is not None:
            queue.push(out.data)


def _nonzero_rows(t: Tensor2D) -> Tensor2D | None:
    keep = np.flatnonzero(np.any(t.data != 0.0, axis=1))
    if keep.size == 0:
        return None
    if keep.size == t.rows:
        return t
    return gather_rows(t, keep)


def experts_contrastive_loss(
    current_outputs: Sequence[Tensor2D | None],
    queues: Sequence[ExpertQueue],
    tau: float,
    normalize: bool = True,
) -> Tensor2D:
    """InfoNCE over expert queues, averaged over (anchor, positive) pairs.

    Each current output row of expert ``i`` is an anchor; expert ``i``'s
    queue entries are its positives and every queue entry of every expert
    forms the softmax denominator. Queue entries are constants. Zero rows
    are skipped. Returns a 1x1 zero when no pair exists.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if len(current_outputs) != len(queues):
        raise DimensionError(f"{len(current_outputs)} expert outputs for {len(queues)} queues")

    stored = [q.entries() for q in queues]
    sizes = [len(s) for s in stored]
    if sum(sizes) == 0:
        return Tensor2D.zeros(1, 1)
    keys = np.concatenate([s for s in stored if len(s)], axis=0)

    blocks, owners = [], []
    for i, out in enumerate(current_outputs):
        if out is None or sizes[i] == 0:
            continue
        anchors = _nonzero_rows(out)
        if anchors is not None:
            blocks.append(anchors)
            owners.append(i)
    if not blocks:
        return Tensor2D.zeros(1, 1)

    anchors = blocks[0] if len(blocks) == 1 else concat_rows(blocks)
    if normalize:
        anchors = l2_normalize_rows(anchors)
    key_sums = np.zeros((len(queues), keys.shape[1]))
    for i, s in enumerate(stored):
        if len(s):
            key_sums[i] = s.sum(axis=0)
    owner_rows = np.concatenate([np.full(b.rows, i) for b, i in zip(blocks, owners)])
    return _queue_infonce(anchors, keys, key_sums[owner_rows], np.array(sizes, dtype=np.float64)[owner_rows], tau)


_scratch: list[np.ndarray] = []


def _take_scratch(rows: int, cols: int) -> np.ndarray:
    """A reusable ``rows x cols`` work array; large fresh allocations are slow to fault in."""
    for i, buf in enumerate(_scratch):
        if buf.size >= rows * cols:
            return _scratch.pop(i)[: rows * cols].reshape(rows, cols)
    return np.empty((rows, cols))


def _give_scratch(buf: np.ndarray) -> None:
    base = buf.base if buf.base is not None else buf
    if len(_scratch) < 4:
        _scratch.append(base.reshape(-1))


def _queue_infonce(
    anchors: Tensor2D, keys: np.ndarray, own_sums: np.ndarray, n_pos: np.ndarray, tau: float
) -> Tensor2D:
    """Pair-averaged InfoNCE as a single tape node.

    Summing log-softmax over an anchor's positives collapses to
    ``q . (sum of own keys) / tau - |positives| * logsumexp(q . K / tau)``,
    so one ``anchors x keys`` score matrix serves every pair.
    """
    Q = anchors.data
    pairs = float(n_pos.sum())
    Z = _take_scratch(Q.shape[0], keys.shape[0])
    np.matmul(Q, keys.T, out=Z)
    Z /= tau
    top = Z.max(axis=1)
    Z -= top[:, None]
    np.exp(Z, out=Z)
    total = Z.sum(axis=1)
    lse = top + np.log(total)
    positive = np.einsum("ij,ij->i", Q, own_sums) / tau
    value = float((n_pos @ lse - positive.sum()) / pairs)
    out = Tensor2D._wrap(np.array([[value]]))

    def rule(g: np.ndarray) -> np.ndarray:
        np.multiply(Z, (n_pos / total)[:, None], out=Z)
        grad = (Z @ keys - own_sums) * (float(g[0, 0]) / (tau * pairs))
        _give_scratch(Z)
        return grad

    recorded = _record(out, (anchors,), rule)
    tape = _active_tape.get()
    if tape is None or not tape.tracks(anchors):
        _give_scratch(Z)
    return recorded


def auxiliary_loss(l_balance, l_contrast, cfg: AuxLossConfig):
    """``alpha * l_balance + beta * l_contrast``; accepts tensors or floats."""
    if isinstance(l_balance, Tensor2D) or isinstance(l_contrast, Tensor2D):
        lb = l_balance if isinstance(l_balance, Tensor2D) else Tensor2D([[l_balance]])
        lc = l_contrast if isinstance(l_contrast, Tensor2D) else Tensor2D([[l_contrast]])
        return scale(lb, cfg.alpha) + scale(lc, cfg.beta)
    return cfg.alpha * l_balance + cfg.beta * l_contrast


def mse_loss(pred: Tensor2D, target: Tensor2D) -> Tensor2D:
    diff = sub(pred, target)
    return reduce_mean(mul(diff, diff))


def _unit_rows(rows) -> np.ndarray:
    arr = rows.data if isinstance(rows, Tensor2D) else np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 0))
    arr = np.atleast_2d(arr)
    norms = np.linalg.norm(arr, axis=1)
    keep = norms > 0
    return arr[keep] / norms[keep, None]


def expert_separation_score(current_outputs: Sequence) -> tuple[float, float]:
    """Mean cosine distance between outputs of the same expert and of different experts.

    Returns ``(intra, inter)``. Zero rows are ignored.
    """
    units = [_unit_rows(o) if o is not None else np.zeros((0, 0)) for o in current_outputs]
    counts = [len(u) for u in units]

    intra_sum, intra_pairs = 0.0, 0
    for u in units:
        m = len(u)
        if m < 2:
            continue
        sims = u @ u.T
        intra_sum += float((1.0 - sims)[np.triu_indices(m, k=1)].sum())
        intra_pairs += m * (m - 1) // 2
    if intra_pairs == 0:
        raise ValueError(f"intra-expert distance needs an expert with >= 2 outputs; counts {counts}")

    inter_sum, inter_pairs = 0.0, 0
    for i in range(len(units)):
        for j in range(i + 1, len(units)):
            if counts[i] == 0 or counts[j] == 0:
                continue
            inter_sum += float((1.0 - units[i] @ units[j].T).sum())
            inter_pairs += counts[i] * counts[j]
    if inter_pairs == 0:
        raise ValueError(f"inter-expert distance needs two experts with outputs; counts {counts}")
    return intra_sum / intra_pairs, inter_sum / inter_pairs
