"""Synthetic multi-cluster regression, a toy adapted model and its training loop.

Each task cluster has its own linear map ``M_c = M_shared + Delta_c`` with a
low-rank cluster-specific ``Delta_c``. The frozen base model already
implements ``M_shared`` (through a tanh), so the adapters have to learn the
cluster corrections, which is where routing can help.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from moelora.adapters import DispatchResult, MoELoraLayer, moelora_forward
from moelora.losses import (
    AuxLossConfig,
    ExpertQueue,
    auxiliary_loss,
    experts_contrastive_loss,
    expert_separation_score,
    load_balance_loss,
    mse_loss,
    update_queues,
)
from moelora.numerics import SeededRng, Tape, Tensor2D, backward, matmul, tanh
from moelora.tracer import RoutingSummary, RoutingTracer

log = logging.getLogger(__name__)

__all__ = [
    "SyntheticTask",
    "DenseLayer",
    "ToyModel",
    "TrainConfig",
    "StepReport",
    "TrainingError",
    "SGD",
    "clip_grad_norm",
    "Adam",
    "generate_batch",
    "build_model",
    "train_step",
    "train",
    "evaluate",
    "run_experiment",
    "run_ablation",
    "write_ablation_csv",
    "ABLATION_COLUMNS",
]


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


def _orthogonal(rng: SeededRng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(d, d))
    return q * np.sign(np.diag(r))


@dataclass
class SyntheticTask:
    """Clustered inputs with a cluster-specific linear target map.

    Token ``x`` from cluster ``c`` is ``centers[c] + input_std * N(0, I)``
    and its target is ``x @ maps[c] + noise_std * N(0, I)``.
    """

    d: int
    n_clusters: int
    noise_std: float
    seed: int
    centers: np.ndarray
    shared_map: np.ndarray
    maps: list[np.ndarray]
    input_std: float = 0.3
    cluster_weights: np.ndarray | None = None

    @classmethod
    def generate(
        cls,
        d: int = 32,
        n_clusters: int = 4,
        seed: int = 0,
        noise_std: float = 0.05,
        *,
        center_norm: float = 1.5,
        input_std: float = 0.3,
        delta_rank: int = 2,
        delta_scale: float = 1.0,
        cluster_weights: Sequence[float] | None = None,
    ) -> SyntheticTask:
        rng = SeededRng.derive(seed, "task")
        centers = rng.normal(n_clusters, d)
        centers *= center_norm / np.linalg.norm(centers, axis=1, keepdims=True)
        shared = _orthogonal(rng, d)
        maps = []
        for _ in range(n_clusters):
            u = rng.normal(d, delta_rank) / math.sqrt(d)
            v = rng.normal(d, delta_rank) / math.sqrt(delta_rank)
            maps.append(shared + delta_scale * u @ v.T)
        weights = None
        if cluster_weights is not None:
            weights = np.asarray(cluster_weights, dtype=np.float64)
            weights = weights / weights.sum()
        task = cls(d, n_clusters, noise_std, seed, centers, shared, maps, input_std, weights)
        if n_clusters > 1 and task.min_map_distance() <= 0.1:
            raise ValueError(f"cluster maps too close ({task.min_map_distance():.3g}); pick another seed")
        return task

    def min_map_distance(self) -> float:
        best = math.inf
        for i in range(self.n_clusters):
            for j in range(i + 1, self.n_clusters):
                best = min(best, float(np.linalg.norm(self.maps[i] - self.maps[j])))
        return best


def generate_batch(task: SyntheticTask, T: int, rng: SeededRng) -> tuple[Tensor2D, Tensor2D, np.ndarray]:
    if T < 1:
        raise ValueError(f"batch size must be positive, got {T}")
    g = rng.generator
    if task.cluster_weights is None:
        ids = g.integers(0, task.n_clusters, size=T)
    else:
        ids = g.choice(task.n_clusters, size=T, p=task.cluster_weights)
    x = task.centers[ids] + task.input_std * g.normal(size=(T, task.d))
    y = np.empty_like(x)
    for c in range(task.n_clusters):
        rows = ids == c
        y[rows] = x[rows] @ task.maps[c]
    if task.noise_std > 0:
        y += task.noise_std * g.normal(size=(T, task.d))
    return Tensor2D(x), Tensor2D(y), ids


@dataclass
class DenseLayer:
    """Frozen, unadapted linear layer."""

    W: Tensor2D

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor2D]]:
        return [(f"{prefix}W", self.W)]


@dataclass
class ToyModel:
    """Stack of frozen or adapted linear layers with tanh in between."""

    layers: list[MoELoraLayer | DenseLayer]

    def forward(
        self,
        x: Tensor2D,
        rng: SeededRng | None = None,
        training: bool = False,
        selections: Sequence[np.ndarray | None] | None = None,
    ) -> tuple[Tensor2D, list[DispatchResult]]:
        dispatches = []
        h = x
        moe_index = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MoELoraLayer):
                pinned = selections[moe_index] if selections is not None else None
                h, d = moelora_forward(layer, h, rng, training, pinned)
                dispatches.append(d)
                moe_index += 1
            else:
                h = matmul(h, layer.W)
            if i < len(self.layers) - 1:
                h = tanh(h)
        return h, dispatches

    def base_forward(self, x: Tensor2D) -> Tensor2D:
        """The frozen network alone, adapters ignored."""
        h = x
        for i, layer in enumerate(self.layers):
            W = layer.W_base if isinstance(layer, MoELoraLayer) else layer.W
            h = matmul(h, W)
            if i < len(self.layers) - 1:
                h = tanh(h)
        return h

    @property
    def adapted(self) -> list[MoELoraLayer]:
        return [l for l in self.layers if isinstance(l, MoELoraLayer)]

    def parameters(self) -> list[Tensor2D]:
        return [p for layer in self.adapted for p in layer.parameters()]

    def named_tensors(self) -> list[tuple[str, Tensor2D]]:
        named = []
        for i, layer in enumerate(self.layers):
            named.extend(layer.named_tensors(f"layers.{i}."))
        return named

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        trainable = {id(p) for p in self.parameters()}
        for name, t in self.named_tensors():
            if id(t) not in trainable:
                h.update(name.encode())
                h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings.

    ``grad_clip`` bounds the global L2 norm of each step's gradient (``None``
    disables clipping).
    """

    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.5
    optimizer: str = "sgd"
    grad_clip: float | None = 1.0
    adapter: str = "moelora"
    n: int = 8
    r: int = 4
    top_k: int = 2
    d: int = 32
    n_clusters: int = 4
    noise_std: float = 0.05
    lora_dropout: float = 0.05
    scaling: float = 1.0
    gate_init_std: float = 0.1
    renormalize_topk: bool = True
    normalize_embeddings: bool = True
    balance_count_topk: bool = False
    num_layers: int = 2
    eval_batches: int = 4
    seed: int = 0
    aux: AuxLossConfig = field(default_factory=AuxLossConfig)

    def __post_init__(self) -> None:
        for name in ("steps", "batch_size", "n", "r", "top_k", "d", "n_clusters", "num_layers", "eval_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.adapter not in ("moelora", "lora"):
            raise ValueError(f"adapter must be 'moelora' or 'lora', got {self.adapter!r}")
        if self.adapter == "moelora" and self.top_k > self.n:
            raise ValueError(f"top_k={self.top_k} exceeds n={self.n}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if isinstance(self.aux, dict):
            object.__setattr__(self, "aux", AuxLossConfig(**self.aux))

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        """Build from a plain mapping; unknown keys raise ``ValueError``."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(raw)
        if "aux" in values:
            aux = values["aux"]
            if not isinstance(aux, dict):
                raise ValueError("'aux' must be an object")
            aux_known = {f.name for f in dataclasses.fields(AuxLossConfig)}
            bad = sorted(set(aux) - aux_known)
            if bad:
                raise ValueError(f"unknown aux keys: {', '.join(bad)}")
            values["aux"] = AuxLossConfig(**aux)
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> TrainConfig:
        aux_keys = {f.name for f in dataclasses.fields(AuxLossConfig)}
        aux_changes = {k: changes.pop(k) for k in list(changes) if k in aux_keys}
        if aux_changes:
            changes["aux"] = dataclasses.replace(self.aux, **aux_changes)
        return dataclasses.replace(self, **changes)


def build_task(cfg: TrainConfig) -> SyntheticTask:
    return SyntheticTask.generate(cfg.d, cfg.n_clusters, cfg.seed, cfg.noise_std)


def build_model(cfg: TrainConfig, task: SyntheticTask) -> ToyModel:
    """Frozen base whose linear part composes to the task's shared map, with every layer adapted."""
    rng = SeededRng.derive(cfg.seed, "model")
    weights = []
    remaining = task.shared_map
    for _ in range(cfg.num_layers - 1):
        q = _orthogonal(rng, cfg.d)
        weights.append(remaining @ q.T)
        remaining = q
    weights.append(remaining)

    layers: list[MoELoraLayer | DenseLayer] = []
    for W in weights:
        base = Tensor2D(W, name="W_base")
        if cfg.adapter == "lora":
            layer = MoELoraLayer.init(
                base, 1, cfg.r, 1, rng, gated=False, dropout_p=cfg.lora_dropout, scaling=cfg.scaling
            )
        else:
            layer = MoELoraLayer.init(
                base,
                cfg.n,
                cfg.r,
                cfg.top_k,
                rng,
                dropout_p=cfg.lora_dropout,
                scaling=cfg.scaling,
                renormalize_topk=cfg.renormalize_topk,
                gate_std=cfg.gate_init_std,
            )
        layers.append(layer)
    return ToyModel(layers)


def make_queues(model: ToyModel, cfg: TrainConfig) -> list[list[ExpertQueue]]:
    return [
        [ExpertQueue(cfg.aux.queue_capacity, cfg.normalize_embeddings) for _ in range(layer.n)]
        for layer in model.adapted
    ]


class SGD:
    def __init__(self, params: Sequence[Tensor2D], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is not None:
                p.data = p.data - self.lr * g.data


class Adam:
    def __init__(self, params: Sequence[Tensor2D], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g.data
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g.data * g.data
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def clip_grad_norm(grads, params: Sequence[Tensor2D], max_norm: float) -> float:
    """Scale the gradients of ``params`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    present = [g for g in (grads.get(p) for p in params) if g is not None]
    norm = math.sqrt(sum(float(np.vdot(g.data, g.data)) for g in present))
    if norm > max_norm:
        factor = max_norm / norm
        for g in present:
            g.data = g.data * factor
    return norm


def make_optimizer(cfg: TrainConfig, params: Sequence[Tensor2D]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate)


@dataclass
class StepReport:
    step: int
    task_loss: float
    balance_loss: float
    contrastive_loss: float
    total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_step(
    model: ToyModel,
    batch: tuple[Tensor2D, Tensor2D, np.ndarray],
    cfg: TrainConfig,
    queues: list[list[ExpertQueue]],
    optimizer,
    rng: SeededRng | None = None,
    step: int = 0,
    tape: Tape | None = None,
) -> StepReport:
    """One optimization step on ``task MSE + sum over layers (alpha*L_l + beta*L_E)``.

    The contrastive term is evaluated against the queues as they were before
    this step; the step's expert outputs are pushed afterwards.
    """
    x, y, _ = batch
    tape = Tape() if tape is None else tape
    with tape:
        pred, dispatches = model.forward(x, rng, training=True)
        task = mse_loss(pred, y)
        total = task
        lb_sum = 0.0
        lc_sum = 0.0
        for layer, d, layer_queues in zip(model.adapted, dispatches, queues):
            if layer.gate is None:
                continue
            lb = load_balance_loss(d.gate_probs, d, cfg.balance_count_topk)
            outputs = d.expert_outputs
            if cfg.aux.beta == 0:
                # reported only; keep it off the tape
                outputs = [None if o is None else o.detach() for o in outputs]
            lc = experts_contrastive_loss(outputs, layer_queues, cfg.aux.tau, cfg.normalize_embeddings)
            lb_sum += lb.item()
            lc_sum += lc.item()
            total = total + auxiliary_loss(lb, lc, cfg.aux)
    report = StepReport(step, task.item(), lb_sum, lc_sum, total.item())
    if not all(math.isfinite(v) for v in (report.task_loss, report.balance_loss, report.contrastive_loss, report.total)):
        raise TrainingError(f"non-finite loss at step {step}: {report}")

    grads = backward(total, tape)
    if cfg.grad_clip is not None:
        clip_grad_norm(grads, optimizer.params, cfg.grad_clip)
    optimizer.step(grads)

    for layer, d, layer_queues in zip(model.adapted, dispatches, queues):
        if layer.gate is not None:
            update_queues(layer_queues, d.expert_outputs, d)
    return report


@dataclass
class TrainResult:
    config: TrainConfig
    task: SyntheticTask
    model: ToyModel
    queues: list[list[ExpertQueue]]
    reports: list[StepReport]


def train(
    cfg: TrainConfig,
    on_step: Callable[[StepReport], None] | None = None,
    task: SyntheticTask | None = None,
) -> TrainResult:
    task = build_task(cfg) if task is None else task
    model = build_model(cfg, task)
    queues = make_queues(model, cfg)
    optimizer = make_optimizer(cfg, model.parameters())
    data_rng = SeededRng.derive(cfg.seed, "train-data")
    dropout_rng = SeededRng.derive(cfg.seed, "dropout")
    reports = []
    for step in range(cfg.steps):
        batch = generate_batch(task, cfg.batch_size, data_rng)
        report = train_step(model, batch, cfg, queues, optimizer, dropout_rng, step)
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return TrainResult(cfg, task, model, queues, reports)


@dataclass
class EvalResult:
    loss: float
    summary: RoutingSummary | None
    tracer: RoutingTracer | None


def evaluate(
    model: ToyModel,
    task: SyntheticTask,
    num_batches: int = 4,
    batch_size: int = 64,
    seed: int = 0,
) -> EvalResult:
    """Mean task MSE over fresh batches with dropout off, plus the routing summary.

    Queues are not touched. Identical arguments give identical results.
    """
    rng = SeededRng.derive(seed, "eval-data")
    adapted = model.adapted
    gated = [l for l in adapted if l.gate is not None]
    tracer = RoutingTracer(gated[0].n, gated[0].top_k) if gated else None
    outputs: list[list[list[np.ndarray]]] = [[[] for _ in range(l.n)] for l in adapted]
    losses = []
    for b in range(num_batches):
        x, y, ids = generate_batch(task, batch_size, rng)
        pred, dispatches = model.forward(x, training=False)
        losses.append(mse_loss(pred, y).item())
        tags = [str(c) for c in ids]
        for li, (layer, d) in enumerate(zip(adapted, dispatches)):
            if layer.gate is None:
                continue
            tracer.record_batch(b, li, tags, d.gate_probs.data, d.selected)
            for e, out in enumerate(d.expert_outputs):
                if out is not None:
                    outputs[li][e].append(out.data)
    summary = None
    if tracer is not None:
        separation = {}
        for li, layer in enumerate(adapted):
            if layer.gate is None:
                continue
            per_expert = [np.concatenate(o) if o else None for o in outputs[li]]
            try:
                separation[li] = expert_separation_score(per_expert)
            except ValueError:
                separation[li] = None
        summary = tracer.summarize(separation=separation)
    return EvalResult(float(np.mean(losses)), summary, tracer)


@dataclass
class RunResult:
    config: TrainConfig
    final_loss: float
    summary: RoutingSummary | None
    reports: list[StepReport]


def run_experiment(cfg: TrainConfig) -> RunResult:
    res = train(cfg)
    ev = evaluate(res.model, res.task, cfg.eval_batches, cfg.batch_size, seed=cfg.seed)
    return RunResult(cfg, ev.loss, ev.summary, res.reports)


ABLATION_COLUMNS = (
    "label",
    "adapter",
    "n",
    "r",
    "top_k",
    "alpha",
    "beta",
    "tau",
    "renormalize_topk",
    "normalize_embeddings",
    "balance_count_topk",
    "steps",
    "num_seeds",
    "final_loss_mean",
    "final_loss_std",
    "nmi_mean",
    "nmi_std",
    "max_load_mean",
    "load_entropy_mean",
    "intra_mean",
    "inter_mean",
    "separation_ratio_mean",
    "separation_ratio_std",
)

_AXIS_FIELDS = ("adapter", "n", "r", "top_k", "renormalize_topk", "normalize_embeddings", "balance_count_topk", "steps")


def _stats(values: Iterable[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def _summary_metrics(summary: RoutingSummary | None) -> dict:
    if summary is None:
        nan = float("nan")
        return {"nmi": nan, "max_load": nan, "load_entropy": nan, "intra": nan, "inter": nan, "ratio": nan}
    loads = [max(f) for f in summary.load_fractions.values() if f is not None]
    ents = [e for e in summary.entropy.values() if e is not None]
    seps = [s for s in summary.separation.values() if s is not None]
    return {
        "nmi": summary.specialization_nmi,
        "max_load": float(np.mean(loads)) if loads else float("nan"),
        "load_entropy": float(np.mean(ents)) if ents else float("nan"),
        "intra": float(np.mean([s[0] for s in seps])) if seps else float("nan"),
        "inter": float(np.mean([s[1] for s in seps])) if seps else float("nan"),
        "ratio": summary.separation_ratio,
    }


def _run_for_ablation(cfg: TrainConfig) -> tuple[float, dict]:
    res = run_experiment(cfg)
    return res.final_loss, _summary_metrics(res.summary)


def _check_axes(grid: Sequence[TrainConfig], axes: Sequence[str]) -> None:
    ref = grid[0].to_dict()
    ref_aux = ref.pop("aux")
    for cfg in grid[1:]:
        cur = cfg.to_dict()
        cur_aux = cur.pop("aux")
        diff = {k for k in ref if ref[k] != cur[k]} | {k for k in ref_aux if ref_aux[k] != cur_aux[k]}
        stray = sorted(diff - set(axes) - {"seed"})
        if stray:
            raise ValueError(f"ablation configs differ outside declared axes: {stray}")


def run_ablation(
    grid: Sequence[TrainConfig],
    seeds: Sequence[int] = (0, 1, 2),
    labels: Sequence[str] | None = None,
    axes: Sequence[str] | None = None,
    workers: int = 1,
) -> list[dict]:
    """Train every config of ``grid`` under every seed and tabulate the outcomes.

    One row per config with per-seed mean/std of the final evaluation loss,
    routing NMI, load statistics and expert separation.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    if axes is not None:
        _check_axes(grid, axes)
    labels = list(labels) if labels is not None else [f"config{i}" for i in range(len(grid))]
    jobs = [cfg.replace(seed=s) for cfg in grid for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_for_ablation, jobs))
    else:
        outcomes = [_run_for_ablation(j) for j in jobs]

    rows = []
    for ci, cfg in enumerate(grid):
        chunk = outcomes[ci * len(seeds) : (ci + 1) * len(seeds)]
        losses = [c[0] for c in chunk]
        metrics = [c[1] for c in chunk]
        row = {"label": labels[ci]}
        row.update({k: getattr(cfg, k) for k in _AXIS_FIELDS})
        row.update({"alpha": cfg.aux.alpha, "beta": cfg.aux.beta, "tau": cfg.aux.tau, "num_seeds": len(seeds)})
        row["final_loss_mean"], row["final_loss_std"] = _stats(losses)
        row["nmi_mean"], row["nmi_std"] = _stats(m["nmi"] for m in metrics)
        row["max_load_mean"], _ = _stats(m["max_load"] for m in metrics)
        row["load_entropy_mean"], _ = _stats(m["load_entropy"] for m in metrics)
        row["intra_mean"], _ = _stats(m["intra"] for m in metrics)
        row["inter_mean"], _ = _stats(m["inter"] for m in metrics)
        row["separation_ratio_mean"], row["separation_ratio_std"] = _stats(m["ratio"] for m in metrics)
        rows.append({k: row[k] for k in ABLATION_COLUMNS})
        log.info("ablation %s: loss %.6g nmi %.4g", labels[ci], row["final_loss_mean"], row["nmi_mean"])
    return rows


def write_ablation_csv(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
