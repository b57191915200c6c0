"""Command-line entry point: ``moelora {train,eval,trace,ablate,params}``.

Exit codes: 0 on success, 1 when a run fails, 2 for usage or configuration
errors.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from moelora import __version__
from moelora.adapters import lora_param_count, matched_lora_rank, moelora_param_count
from moelora.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from moelora.harness import (
    TrainConfig,
    TrainingError,
    build_task,
    evaluate,
    run_ablation,
    train,
    write_ablation_csv,
)
from moelora.tracer import export, token_frequency_table, write_frequency_table

log = logging.getLogger("moelora")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

PRECEDENCE = "Settings resolve as: command-line flags, then --config file values, then built-in defaults."

# flag destination -> TrainConfig (or aux) field
_OVERRIDES = {
    "seed": "seed",
    "steps": "steps",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "top_k": "top_k",
    "n": "n",
    "r": "r",
    "alpha": "alpha",
    "beta": "beta",
    "tau": "tau",
    "renormalize_topk": "renormalize_topk",
    "normalize_embeddings": "normalize_embeddings",
    "balance_count_topk": "balance_count_topk",
}


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides", PRECEDENCE)
    g.add_argument("--seed", type=int, help="random seed for data, initialization and dropout")
    g.add_argument("--steps", type=int, help="training steps")
    g.add_argument("--batch-size", type=int, help="tokens per step")
    g.add_argument("--lr", dest="learning_rate", type=float, help="learning rate")
    g.add_argument("--top-k", type=int, help="experts kept per token")
    g.add_argument("--n", type=int, help="number of experts")
    g.add_argument("--r", type=int, help="rank of each expert")
    g.add_argument("--alpha", type=float, help="load-balance loss weight")
    g.add_argument("--beta", type=float, help="contrastive loss weight")
    g.add_argument("--tau", type=float, help="contrastive temperature")
    bool_flag = argparse.BooleanOptionalAction
    g.add_argument("--renormalize-topk", action=bool_flag, default=None, help="rescale kept gate weights to sum to 1")
    g.add_argument(
        "--normalize-embeddings", action=bool_flag, default=None, help="L2-normalize contrastive anchors and queue entries"
    )
    g.add_argument(
        "--balance-count-topk", action=bool_flag, default=None, help="count every top-k slot in the load-balance share"
    )


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return raw


def _config_from(raw: dict, source: str) -> TrainConfig:
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{source}: {exc}") from exc


def _apply_overrides(cfg: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    changes = {field: getattr(args, dest) for dest, field in _OVERRIDES.items() if getattr(args, dest, None) is not None}
    try:
        return cfg.replace(**changes) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = _config_from(_read_json(args.config), args.config) if args.config else TrainConfig()
    return _apply_overrides(cfg, args)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _summary_payload(loss: float, summary) -> dict:
    payload: dict = {"eval_loss": loss}
    if summary is not None:
        payload["specialization_nmi"] = summary.specialization_nmi
        payload["separation_ratio"] = summary.separation_ratio
        payload["nmi"] = {str(k): v for k, v in summary.nmi.items()}
        payload["load_entropy"] = {str(k): v for k, v in summary.entropy.items()}
    return payload


def _write_trace(out: Path, ev, fmt: str) -> list[Path]:
    if ev.summary is None:
        return []
    written = export(ev.summary, out / f"trace.{fmt}", fmt)
    table = out / "token_frequency.csv"
    write_frequency_table(token_frequency_table(ev.tracer.records), table)
    return written + [table]


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps_path = out / "steps.jsonl"
    every = max(1, cfg.steps // 10)
    with steps_path.open("w") as fh:

        def on_step(report) -> None:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            if report.step % every == 0 or report.step == cfg.steps - 1:
                log.info("step %d task %.6g total %.6g", report.step, report.task_loss, report.total)

        result = train(cfg, on_step=on_step)
    save_checkpoint(out / "checkpoint", result.model, cfg)
    ev = evaluate(result.model, result.task, cfg.eval_batches, cfg.batch_size, seed=cfg.seed)
    _write_trace(out, ev, args.trace_format)
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "metrics.json", _summary_payload(ev.loss, ev.summary))
    print(f"eval loss {ev.loss:.6g}; outputs in {out}")
    return EXIT_OK


def _load(args: argparse.Namespace):
    try:
        return load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, model = _load(args)
    seed = cfg.seed if args.seed is None else args.seed
    batches = cfg.eval_batches if args.batches is None else args.batches
    ev = evaluate(model, build_task(cfg), batches, cfg.batch_size, seed=seed)
    payload = _summary_payload(ev.loss, ev.summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    cfg, model = _load(args)
    seed = cfg.seed if args.seed is None else args.seed
    batches = cfg.eval_batches if args.batches is None else args.batches
    ev = evaluate(model, build_task(cfg), batches, cfg.batch_size, seed=seed)
    if ev.summary is None:
        print("model has no gated layers; nothing to trace", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in _write_trace(out, ev, args.format):
        print(path)
    return EXIT_OK


def _ablation_grid(spec: dict, base: TrainConfig, source: str) -> tuple[list[TrainConfig], list[str], list[str] | None]:
    """Expand ``grid`` (a list of override objects) or ``axes`` (a cartesian product) over ``base``."""
    if ("grid" in spec) == ("axes" in spec):
        raise UsageError(f"{source}: give exactly one of 'grid' or 'axes'")
    if "axes" in spec:
        axes = spec["axes"]
        if not isinstance(axes, dict) or not axes or any(not v for v in axes.values()):
            raise UsageError(f"{source}: 'axes' must map field names to non-empty value lists")
        names = list(axes)
        combos = [dict(zip(names, values)) for values in itertools.product(*axes.values())]
        labels = [",".join(f"{k}={v}" for k, v in c.items()) for c in combos]
        declared = names
    else:
        grid = spec["grid"]
        if not isinstance(grid, list) or not grid:
            raise UsageError(f"{source}: ablation grid is empty")
        combos, labels = [], []
        for i, entry in enumerate(grid):
            entry = dict(entry)
            labels.append(str(entry.pop("label", f"config{i}")))
            combos.append(entry)
        declared = None
    configs = []
    for c in combos:
        try:
            configs.append(base.replace(**c))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{source}: {exc}") from exc
    return configs, labels, declared


def cmd_ablate(args: argparse.Namespace) -> int:
    spec = _read_json(args.config)
    unknown = sorted(set(spec) - {"base", "grid", "axes", "seeds"})
    if unknown:
        raise UsageError(f"{args.config}: unknown keys: {', '.join(unknown)}")
    base = _apply_overrides(_config_from(spec.get("base", {}), args.config), args)
    configs, labels, axes = _ablation_grid(spec, base, args.config)
    seeds = spec.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise UsageError(f"{args.config}: 'seeds' must be a non-empty list of integers")
    rows = run_ablation(configs, seeds, labels, axes, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out / "ablation.csv")
    print(out / "ablation.csv")
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    for label in ("d", "matrices", "n", "r"):
        if getattr(args, label) < 1:
            raise UsageError(f"--{label} must be positive")
    R = matched_lora_rank(args.n, args.r) if args.lora_rank is None else args.lora_rank
    if R < 1:
        raise UsageError("--lora-rank must be positive")
    lora = lora_param_count(R, args.d, args.matrices)
    moe = moelora_param_count(args.n, args.r, args.d, args.matrices)
    gate = args.matrices * args.d * args.n
    rows = [
        ("adapter", f"LoRA (R={R})", f"MoELoRA (n={args.n}, r={args.r})"),
        ("expert factors", f"{lora:,}", f"{moe - gate:,}"),
        ("gate", "0", f"{gate:,}"),
        ("trainable total", f"{lora:,}", f"{moe:,}"),
    ]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    w2 = max(len(r[2]) for r in rows)
    print(f"d={args.d}, adapted matrices={args.matrices}")
    for a, b, c in rows:
        print(f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}")
    print("equal" if lora == moe else f"difference {moe - lora:+,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelora",
        description="Mixture-of-LoRA-experts training, routing analysis and parameter accounting.",
        epilog=PRECEDENCE,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    p = sub.add_parser("train", parents=[common], help="train on the synthetic task", epilog=PRECEDENCE)
    p.add_argument("--config", help="JSON training config (unknown keys are rejected)")
    p.add_argument("--out", default="runs/train", help="output directory (default: %(default)s)")
    p.add_argument("--trace-format", choices=("csv", "json"), default="csv", help="routing trace format")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "evaluate a checkpoint on fresh batches"),
        ("trace", cmd_trace, "export routing histograms for a checkpoint"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True, help="checkpoint directory written by 'train'")
        p.add_argument("--seed", type=int, help="evaluation data seed (default: the training seed)")
        p.add_argument("--batches", type=int, help="number of evaluation batches")
        if name == "eval":
            p.add_argument("--out", help="also write eval.json here")
        else:
            p.add_argument("--out", default="runs/trace", help="output directory (default: %(default)s)")
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.set_defaults(func=func)

    p = sub.add_parser(
        "ablate",
        parents=[common],
        help="train a grid of configs over several seeds",
        description=(
            "The config file holds {'base': {...}, 'seeds': [...]} and either 'grid', a list of "
            "override objects (each may carry a 'label'), or 'axes', a mapping from field name to "
            "values whose cartesian product is run."
        ),
        epilog=PRECEDENCE + " Overrides apply to 'base'.",
    )
    p.add_argument("--config", required=True, help="JSON ablation spec")
    p.add_argument("--out", default="runs/ablate", help="output directory (default: %(default)s)")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", parents=[common], help="compare trainable parameter counts of LoRA and MoELoRA")
    p.add_argument("--d", type=int, default=4096, help="hidden size of each adapted square matrix")
    p.add_argument("--matrices", type=int, default=64, help="number of adapted matrices")
    p.add_argument("--n", type=int, default=8, help="experts per adapted matrix")
    p.add_argument("--r", type=int, default=4, help="rank of each expert")
    p.add_argument("--lora-rank", type=int, help="plain LoRA rank (default: the parameter-matched rank)")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"moelora {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, ValueError) as exc:
        print(f"moelora {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
