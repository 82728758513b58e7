"""Versioned parameter checkpoints.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
The manifest lists every array (name, shape, element offset) plus the run
config, the step and a format version; ``params.bin`` is the concatenation
of all arrays as little-endian float64.  Optimizer moments are stored as
ordinary entries under the ``opt.m.`` and ``opt.v.`` prefixes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "params.bin"


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not fit the model."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    step: int = 0
    meta: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("opt.")}

    def moments(self, which: str) -> dict[str, np.ndarray]:
        prefix = f"opt.{which}."
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / PAYLOAD, "wb") as fh:
        for name, arr in ckpt.arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(arr.tobytes())
            offset += arr.size
    manifest = {"format_version": FORMAT_VERSION, "step": ckpt.step, "config": ckpt.config,
                "meta": ckpt.meta, "entries": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        raw = np.frombuffer((path / PAYLOAD).read_bytes(), dtype="<f8")
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {manifest.get('format_version')}, "
                              f"expected {FORMAT_VERSION}")
    arrays = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > raw.size:
            raise CheckpointError(f"entry {e['name']} runs past the payload")
        arrays[e["name"]] = raw[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return Checkpoint(arrays, manifest["config"], manifest["step"], manifest.get("meta", {}))


def model_arrays(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_params()}


def load_into(model, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into the model's Params, keeping each Param's dtype."""
    named = dict(model.named_params())
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in named.items():
        if tuple(arrays[name].shape) != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} vs model {p.shape}")
        p.data = arrays[name].astype(p.dtype)
