"""Token-to-expert routing traces and their aggregate statistics."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RoutingRecord",
    "RoutingTracer",
    "RoutingSummary",
    "TraceError",
    "summarize",
    "token_frequency_table",
    "normalized_mutual_information",
    "normalized_entropy",
    "export",
    "read_summary",
    "HISTOGRAM_COLUMNS",
]

HISTOGRAM_COLUMNS = ("layer", "token_type", "expert", "count", "fraction")


class TraceError(ValueError):
    """Invalid routing record or summary request."""


@dataclass(frozen=True)
class RoutingRecord:
    step: int
    layer: int
    token: int
    token_type: str
    probs: tuple[float, ...]
    selected: tuple[int, ...]


def validate_record(rec: RoutingRecord, n_experts: int | None = None, top_k: int | None = None) -> None:
    probs = np.asarray(rec.probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: empty probability vector")
    if n_experts is not None and probs.size != n_experts:
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: {probs.size} probabilities, expected {n_experts}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: probabilities must be finite and >= 0")
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-9:
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: probabilities sum to {total!r}, not 1")
    sel = rec.selected
    if top_k is not None and len(sel) != top_k:
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: {len(sel)} selected experts, expected {top_k}")
    if len(sel) == 0 or len(set(sel)) != len(sel) or any(not 0 <= s < probs.size for s in sel):
        raise TraceError(f"record {rec.step}/{rec.layer}/{rec.token}: bad selection {sel}")


class RoutingTracer:
    """Append-only store of validated routing records."""

    def __init__(self, n_experts: int, top_k: int):
        self.n_experts = n_experts
        self.top_k = top_k
        self.records: list[RoutingRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: RoutingRecord) -> None:
        validate_record(rec, self.n_experts, self.top_k)
        self.records.append(rec)

    def record_batch(
        self,
        step: int,
        layer: int,
        token_types: Sequence[str],
        probs: np.ndarray,
        selected: np.ndarray,
    ) -> None:
        for t, (tag, p, s) in enumerate(zip(token_types, probs, selected)):
            self.record(RoutingRecord(step, layer, t, str(tag), tuple(p.tolist()), tuple(int(i) for i in s)))

    def summarize(self, layers: Iterable[int] | None = None, separation=None) -> RoutingSummary:
        return summarize(self.records, layers=layers, separation=separation)


@dataclass
class RoutingSummary:
    """Aggregated routing statistics.

    ``histograms[(layer, token_type)][e]`` counts how often expert ``e`` was
    among the selected experts of a token of that type. ``load_fractions``
    is the top-1 token share per expert. ``entropy`` is the entropy of the
    load fractions divided by ``ln n``. ``nmi`` compares token types with
    top-1 experts. Per-layer entries are ``None`` for layers without records.
    """

    n_experts: int
    top_k: int
    layers: list[int]
    histograms: dict[tuple[int, str], list[int]]
    token_counts: dict[tuple[int, str], int]
    load_fractions: dict[int, list[float] | None]
    entropy: dict[int, float | None]
    nmi: dict[int, float | None]
    separation: dict[int, tuple[float, float] | None] = field(default_factory=dict)

    @property
    def specialization_nmi(self) -> float:
        vals = [v for v in self.nmi.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def separation_ratio(self) -> float:
        """Mean over layers of intra/inter separation."""
        vals = [s[0] / s[1] for s in self.separation.values() if s is not None and s[1] > 0]
        return float(np.mean(vals)) if vals else float("nan")

    def fraction(self, layer: int, token_type: str, expert: int) -> float:
        key = (layer, token_type)
        return self.histograms[key][expert] / (self.token_counts[key] * self.top_k)


def normalized_entropy(p: Sequence[float]) -> float:
    """Shannon entropy (nats) divided by ``ln len(p)``; 0 for a single outcome."""
    n = len(p)
    if n <= 1:
        return 0.0
    h = -sum(x * math.log(x) for x in p if x > 0)
    return h / math.log(n)


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(labels_a: Sequence, labels_b: Sequence) -> float:
    """NMI with arithmetic-mean normalization, ``2 I(A;B) / (H(A) + H(B))``.

    Two constant labelings agree perfectly and score 1.
    """
    if len(labels_a) != len(labels_b):
        raise TraceError(f"label sequences differ in length: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) == 0:
        raise TraceError("NMI of empty labelings")
    _, ia = np.unique(np.asarray(labels_a), return_inverse=True)
    _, ib = np.unique(np.asarray(labels_b), return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha + hb == 0.0:
        return 1.0
    n = table.sum()
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return max(0.0, 2.0 * mi / (ha + hb))


def summarize(
    records: Sequence[RoutingRecord],
    layers: Iterable[int] | None = None,
    separation: dict[int, tuple[float, float] | None] | None = None,
) -> RoutingSummary:
    if not records:
        raise TraceError("cannot summarize an empty trace")
    n = len(records[0].probs)
    k = len(records[0].selected)
    for rec in records:
        validate_record(rec, n, k)

    by_layer: dict[int, list[RoutingRecord]] = {}
    for rec in records:
        by_layer.setdefault(rec.layer, []).append(rec)
    all_layers = sorted(set(by_layer) | set(layers or ()))

    histograms: dict[tuple[int, str], list[int]] = {}
    token_counts: dict[tuple[int, str], int] = {}
    load: dict[int, list[float] | None] = {}
    entropy: dict[int, float | None] = {}
    nmi: dict[int, float | None] = {}
    for layer in all_layers:
        recs = by_layer.get(layer)
        if not recs:
            load[layer] = entropy[layer] = nmi[layer] = None
            continue
        hist: dict[str, np.ndarray] = {}
        for rec in recs:
            h = hist.setdefault(rec.token_type, np.zeros(n, dtype=np.int64))
            for e in rec.selected:
                h[e] += 1
            token_counts[(layer, rec.token_type)] = token_counts.get((layer, rec.token_type), 0) + 1
        for tag in sorted(hist):
            histograms[(layer, tag)] = hist[tag].tolist()
        top1 = np.array([rec.selected[0] for rec in recs])
        f = (np.bincount(top1, minlength=n) / len(recs)).tolist()
        load[layer] = f
        entropy[layer] = normalized_entropy(f)
        nmi[layer] = normalized_mutual_information([rec.token_type for rec in recs], top1)

    sep = {layer: None for layer in all_layers}
    if separation:
        sep.update({int(k_): (tuple(v) if v is not None else None) for k_, v in separation.items()})
    return RoutingSummary(
        n_experts=n,
        top_k=k,
        layers=all_layers,
        histograms=dict(sorted(histograms.items())),
        token_counts=dict(sorted(token_counts.items())),
        load_fractions=load,
        entropy=entropy,
        nmi=nmi,
        separation=sep,
    )


def token_frequency_table(records: Sequence[RoutingRecord]) -> list[tuple[str, int]]:
    """Token types by descending frequency; each (step, token) counted once."""
    seen: dict[tuple[int, int], str] = {}
    for rec in records:
        seen.setdefault((rec.step, rec.token), rec.token_type)
    counts = Counter(seen.values())
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def _histogram_rows(summary: RoutingSummary) -> list[dict]:
    rows = []
    for (layer, tag), counts in summary.histograms.items():
        denom = summary.token_counts[(layer, tag)] * summary.top_k
        for e, c in enumerate(counts):
            rows.append({"layer": layer, "token_type": tag, "expert": e, "count": c, "fraction": c / denom})
    return rows


def _scalars(summary: RoutingSummary) -> dict:
    return {
        "n_experts": summary.n_experts,
        "top_k": summary.top_k,
        "layers": summary.layers,
        "token_counts": [[layer, tag, c] for (layer, tag), c in summary.token_counts.items()],
        "load_fractions": {str(k): v for k, v in summary.load_fractions.items()},
        "entropy": {str(k): v for k, v in summary.entropy.items()},
        "nmi": {str(k): v for k, v in summary.nmi.items()},
        "separation": {str(k): (list(v) if v is not None else None) for k, v in summary.separation.items()},
    }


def export(summary: RoutingSummary, path: str | Path, format: str = "csv") -> list[Path]:
    """Write ``summary`` and return the files produced.

    ``csv`` writes the histogram table to ``path`` and scalar metrics to the
    same stem with a ``.json`` suffix. ``json`` writes a single document
    containing both.
    """
    path = Path(path)
    if format not in ("csv", "json"):
        raise TraceError(f"unknown export format {format!r}; expected 'csv' or 'json'")
    rows = _histogram_rows(summary)
    scalars = _scalars(summary)
    try:
        if format == "json":
            scalars["histogram"] = rows
            path.write_text(json.dumps(scalars, indent=2))
            return [path]
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTOGRAM_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "fraction": repr(row["fraction"])})
        companion = path.with_suffix(".json")
        companion.write_text(json.dumps(scalars, indent=2))
        return [path, companion]
    except OSError as exc:
        raise OSError(f"could not write routing summary to {path}: {exc}") from exc


def read_histogram_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTOGRAM_COLUMNS:
            raise TraceError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            {
                "layer": int(r["layer"]),
                "token_type": r["token_type"],
                "expert": int(r["expert"]),
                "count": int(r["count"]),
                "fraction": float(r["fraction"]),
            }
            for r in reader
        ]


def read_summary(path: str | Path) -> RoutingSummary:
    """Inverse of :func:`export` for either format."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        rows = doc.pop("histogram")
    else:
        rows = read_histogram_csv(path)
        doc = json.loads(path.with_suffix(".json").read_text())
    n = doc["n_experts"]
    histograms: dict[tuple[int, str], list[int]] = {}
    for r in rows:
        histograms.setdefault((int(r["layer"]), str(r["token_type"])), [0] * n)[int(r["expert"])] = int(r["count"])
    return RoutingSummary(
        n_experts=n,
        top_k=doc["top_k"],
        layers=[int(x) for x in doc["layers"]],
        histograms=dict(sorted(histograms.items())),
        token_counts={(int(layer), str(tag)): int(c) for layer, tag, c in doc["token_counts"]},
        load_fractions={int(k): v for k, v in doc["load_fractions"].items()},
        entropy={int(k): v for k, v in doc["entropy"].items()},
        nmi={int(k): v for k, v in doc["nmi"].items()},
        separation={int(k): (tuple(v) if v is not None else None) for k, v in doc["separation"].items()},
    )


def write_frequency_table(table: Sequence[tuple[str, int]], path: str | Path) -> None:
    total = sum(c for _, c in table)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "token_type", "frequency", "share"])
        for rank, (tag, c) in enumerate(table, start=1):
            writer.writerow([rank, tag, c, repr(c / total)])
