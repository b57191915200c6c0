"""LoRA experts, the gating network and the frozen-base MoELoRA layer.

A MoELoRA layer computes ``x @ W_base + sum_i g_i(x) * LoRA_i(x)`` where only
the ``top_k`` largest gate weights per token are kept. Experts that receive no
token in a batch do no work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moelora.numerics import (
    DimensionError,
    SeededRng,
    Tensor2D,
    div_col,
    dropout,
    gather_rows,
    matmul,
    mul,
    mul_col,
    reduce_sum,
    scale,
    scatter_rows,
    softmax_rows,
    take_cols,
)

__all__ = [
    "ConfigurationError",
    "LoraExpert",
    "GatingNetwork",
    "MoELoraLayer",
    "DispatchResult",
    "lora_forward",
    "gate_forward",
    "dispatch",
    "moelora_forward",
    "trainable_param_count",
    "lora_param_count",
    "moelora_param_count",
    "matched_lora_rank",
]


class ConfigurationError(ValueError):
    """Inconsistent layer or routing configuration."""


@dataclass
class LoraExpert:
    """Down projection ``A`` (d_in x r) followed by up projection ``B`` (r x d_out)."""

    A: Tensor2D
    B: Tensor2D
    dropout_p: float = 0.0
    scaling: float = 1.0

    def __post_init__(self) -> None:
        if self.A.cols != self.B.rows:
            raise DimensionError(f"LoRA factors {self.A.shape} and {self.B.shape} disagree on rank")

    @classmethod
    def init(
        cls,
        d_in: int,
        r: int,
        rng: SeededRng,
        d_out: int | None = None,
        dropout_p: float = 0.0,
        scaling: float = 1.0,
        std: float = 0.02,
    ) -> LoraExpert:
        """Gaussian ``A`` and zero ``B``, so a new expert contributes nothing."""
        d_out = d_in if d_out is None else d_out
        A = Tensor2D(rng.normal(d_in, r, std), requires_grad=True, name="A")
        B = Tensor2D(np.zeros((r, d_out)), requires_grad=True, name="B")
        return cls(A, B, dropout_p, scaling)

    @property
    def rank(self) -> int:
        return self.A.cols

    @property
    def d_in(self) -> int:
        return self.A.rows

    @property
    def d_out(self) -> int:
        return self.B.cols

    def parameters(self) -> list[Tensor2D]:
        return [self.A, self.B]


@dataclass
class GatingNetwork:
    """Bias-free linear router followed by a row softmax."""

    Wg: Tensor2D

    @classmethod
    def init(cls, d: int, n: int, rng: SeededRng, std: float = 0.02) -> GatingNetwork:
        return cls(Tensor2D(rng.normal(d, n, std), requires_grad=True, name="Wg"))

    @property
    def n(self) -> int:
        return self.Wg.cols

    def parameters(self) -> list[Tensor2D]:
        return [self.Wg]


@dataclass
class MoELoraLayer:
    """Frozen base weight plus ``n`` routed LoRA experts.

    With ``gate=None`` the layer is plain LoRA: exactly one expert, always on,
    with weight 1.
    """

    W_base: Tensor2D
    gate: GatingNetwork | None
    experts: list[LoraExpert]
    top_k: int = 1
    renormalize_topk: bool = True

    def __post_init__(self) -> None:
        n = len(self.experts)
        if n == 0:
            raise ConfigurationError("a MoELoRA layer needs at least one expert")
        if self.gate is None:
            if n != 1:
                raise ConfigurationError(f"an ungated layer takes exactly one expert, got {n}")
            self.top_k = 1
        elif self.gate.n != n:
            raise ConfigurationError(f"gate routes to {self.gate.n} experts but layer has {n}")
        if not 1 <= self.top_k <= n:
            raise ConfigurationError(f"top_k must lie in [1, {n}], got {self.top_k}")
        shapes = {(e.d_in, e.rank, e.d_out) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigurationError(f"experts disagree on (d_in, r, d_out): {sorted(shapes)}")
        d_in, _, d_out = shapes.pop()
        if self.W_base.shape != (d_in, d_out):
            raise DimensionError(f"base weight {self.W_base.shape} does not match experts ({d_in}, {d_out})")
        if self.gate is not None and self.gate.Wg.rows != d_in:
            raise DimensionError(f"gate weight {self.gate.Wg.shape} does not take {d_in} inputs")
        self.W_base.requires_grad = False

    @classmethod
    def init(
        cls,
        W_base: Tensor2D,
        n: int,
        r: int,
        top_k: int,
        rng: SeededRng,
        *,
        gated: bool = True,
        dropout_p: float = 0.0,
        scaling: float = 1.0,
        renormalize_topk: bool = True,
        lora_std: float = 0.02,
        gate_std: float = 0.02,
    ) -> MoELoraLayer:
        d_in, d_out = W_base.shape
        gate = GatingNetwork.init(d_in, n, rng, gate_std) if gated else None
        experts = [
            LoraExpert.init(d_in, r, rng, d_out=d_out, dropout_p=dropout_p, scaling=scaling, std=lora_std)
            for _ in range(n)
        ]
        return cls(W_base, gate, experts, top_k, renormalize_topk)

    @property
    def n(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Tensor2D]:
        params = [] if self.gate is None else self.gate.parameters()
        for e in self.experts:
            params.extend(e.parameters())
        return params

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor2D]]:
        named = [(f"{prefix}W_base", self.W_base)]
        if self.gate is not None:
            named.append((f"{prefix}gate.Wg", self.gate.Wg))
        for i, e in enumerate(self.experts):
            named.append((f"{prefix}experts.{i}.A", e.A))
            named.append((f"{prefix}experts.{i}.B", e.B))
        return named


@dataclass
class DispatchResult:
    """Routing decision for one batch.

    ``per_expert_tokens[i]`` lists, in ascending order, the tokens routed to
    expert ``i``. ``expert_outputs[i]`` holds that expert's (unweighted)
    output rows for those tokens once the layer has run, or ``None`` when the
    expert received nothing.
    """

    gate_probs: Tensor2D
    selected: np.ndarray
    sparse_weights: Tensor2D
    per_expert_tokens: list[np.ndarray]
    expert_outputs: list[Tensor2D | None] = field(default_factory=list)

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]

    @property
    def n(self) -> int:
        return self.gate_probs.cols

    def top1(self) -> np.ndarray:
        return self.selected[:, 0].copy()


def lora_forward(
    e: LoraExpert, x: Tensor2D, rng: SeededRng | None = None, training: bool = False
) -> Tensor2D:
    if x.cols != e.d_in:
        raise DimensionError(f"lora_forward: input {x.shape} does not match A {e.A.shape}")
    h = dropout(x, e.dropout_p, rng, training)
    out = matmul(matmul(h, e.A), e.B)
    if e.scaling != 1.0:
        out = scale(out, e.scaling)
    return out


def gate_forward(g: GatingNetwork, x: Tensor2D) -> Tensor2D:
    if x.cols != g.Wg.rows:
        raise DimensionError(f"gate_forward: input {x.shape} does not match Wg {g.Wg.shape}")
    return softmax_rows(matmul(x, g.Wg))


def select_topk(probs: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest entries per row, best first; ties go to the lower index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :top_k]


def dispatch(
    gate_probs: Tensor2D,
    top_k: int,
    renormalize: bool = True,
    selected: np.ndarray | None = None,
) -> DispatchResult:
    """Keep the ``top_k`` largest gate probabilities per token.

    ``selected`` pins the expert choice (e.g. to freeze the routing mask while
    finite-differencing); otherwise it is derived from ``gate_probs``.
    Gradients flow through the retained probabilities only.
    """
    T, n = gate_probs.shape
    if top_k > n or top_k < 1:
        raise ConfigurationError(f"top_k={top_k} is not in [1, n={n}]")
    if selected is None:
        selected = select_topk(gate_probs.data, top_k)
    else:
        selected = np.asarray(selected, dtype=np.intp)
        if selected.shape != (T, top_k):
            raise DimensionError(f"pinned selection {selected.shape} does not match ({T}, {top_k})")

    mask = np.zeros((T, n))
    np.put_along_axis(mask, selected, 1.0, axis=1)
    kept = mul(gate_probs, Tensor2D._wrap(mask))
    sparse = div_col(kept, reduce_sum(kept, axis=1)) if renormalize else kept

    per_expert = [np.flatnonzero(mask[:, i]) for i in range(n)]
    return DispatchResult(gate_probs, selected, sparse, per_expert)


def moelora_forward(
    layer: MoELoraLayer,
    x: Tensor2D,
    rng: SeededRng | None = None,
    training: bool = False,
    selected: np.ndarray | None = None,
) -> tuple[Tensor2D, DispatchResult]:
    T = x.rows
    out = matmul(x, layer.W_base)

    if layer.gate is None:
        ones = Tensor2D._wrap(np.ones((T, 1)))
        result = DispatchResult(ones, np.zeros((T, 1), dtype=np.intp), ones, [np.arange(T)])
        o = lora_forward(layer.experts[0], x, rng, training)
        result.expert_outputs = [o]
        return out + o, result

    probs = gate_forward(layer.gate, x)
    result = dispatch(probs, layer.top_k, layer.renormalize_topk, selected)
    outputs: list[Tensor2D | None] = []
    for i, expert in enumerate(layer.experts):
        tokens = result.per_expert_tokens[i]
        if tokens.size == 0:
            outputs.append(None)
            continue
        o = lora_forward(expert, gather_rows(x, tokens), rng, training)
        outputs.append(o)
        w = take_cols(gather_rows(result.sparse_weights, tokens), [i])
        out = out + scatter_rows(mul_col(o, w), tokens, T)
    result.expert_outputs = outputs
    return out, result


def lora_param_count(R: int, d: int, num_adapted_matrices: int) -> int:
    return num_adapted_matrices * 2 * d * R


def moelora_param_count(n: int, r: int, d: int, num_adapted_matrices: int) -> int:
    return num_adapted_matrices * (n * 2 * d * r + d * n)


def trainable_param_count(n: int, r: int, d: int, num_adapted_matrices: int, gated: bool = True) -> int:
    """Trainable parameters over ``num_adapted_matrices`` adapted d x d projections.

    ``gated=False`` counts plain LoRA (n LoRA factor pairs, no router).
    """
    for label, v in (("n", n), ("r", r), ("d", d), ("num_adapted_matrices", num_adapted_matrices)):
        if int(v) != v or v < 1:
            raise ConfigurationError(f"{label} must be a positive integer, got {v}")
    if gated:
        return moelora_param_count(n, r, d, num_adapted_matrices)
    return num_adapted_matrices * n * 2 * d * r


def matched_lora_rank(n: int, r: int) -> int:
    """Plain-LoRA rank whose parameter count is nearest to a gated n x r mixture.

    Per adapted d x d matrix the mixture holds ``2dnr + dn`` parameters,
    i.e. ``n*r + n/2`` LoRA ranks' worth. Halves round up.
    """
    return (2 * n * r + n + 1) // 2
