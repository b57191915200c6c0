"""Checkpoint directories: a JSON manifest plus one raw little-endian float64 blob per tensor.

Layout::

    <dir>/manifest.json
    <dir>/tensors/0000.bin
    <dir>/tensors/0001.bin
    ...

The manifest lists tensors in file order with their names and shapes, and
carries the training configuration (which includes the seed) so the model
can be rebuilt before its weights are filled in.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from moelora.harness import TrainConfig, ToyModel, build_model, build_task

__all__ = [
    "CheckpointError",
    "FORMAT",
    "save_tensors",
    "load_tensors",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT = "moelora-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint."""


def save_tensors(path: str | Path, tensors: Iterable[tuple[str, np.ndarray]], meta: dict | None = None) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors):
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise CheckpointError(f"tensor {name!r} has {arr.ndim} dimensions, expected 2")
        file = f"tensors/{i:04d}.bin"
        (root / file).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": file})
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "<f8", **(meta or {}), "tensors": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, {name: array})`` with arrays in manifest order."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        rows, cols = entry["shape"]
        raw = (root / entry["file"]).read_bytes()
        if len(raw) != rows * cols * _DTYPE.itemsize:
            raise CheckpointError(f"{entry['file']}: {len(raw)} bytes for shape {entry['shape']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(rows, cols).astype(np.float64)
    return manifest, tensors


def save_checkpoint(path: str | Path, model: ToyModel, cfg: TrainConfig, extra: dict | None = None) -> Path:
    meta = {"config": cfg.to_dict(), "seed": cfg.seed}
    if extra:
        meta["extra"] = extra
    return save_tensors(path, ((name, t.data) for name, t in model.named_tensors()), meta)


def load_checkpoint(path: str | Path) -> tuple[TrainConfig, ToyModel]:
    """Rebuild the model described by the manifest and overwrite every tensor from disk."""
    manifest, tensors = load_tensors(path)
    if "config" not in manifest:
        raise CheckpointError(f"{path}: manifest has no training config")
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_model(cfg, build_task(cfg))
    named = dict(model.named_tensors())
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        unexpected = sorted(set(tensors) - set(named))
        raise CheckpointError(f"{path}: tensor names differ (missing {missing}, unexpected {unexpected})")
    for name, arr in tensors.items():
        if named[name].shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {named[name].shape}")
        named[name].data = arr
    return cfg, model
