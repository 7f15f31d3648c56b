"""Portable checkpoint directories and loss-curve CSV files.

A checkpoint is a directory holding `manifest.json` plus one raw
little-endian float32 file per parameter, named `<parameter path>.f32`.
The format is intentionally framework-neutral: nothing in it requires
pickle or a specific torch version to read back.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, torch.Tensor]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = dict(self.manifest)
        manifest["format"] = FORMAT_VERSION
        manifest["params"] = {
            name: list(t.shape) for name, t in self.tensors.items()
        }
        for name, tensor in self.tensors.items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
            (directory / f"{name}.f32").write_bytes(data.tobytes())
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise CheckpointError(f"no manifest.json in {directory}")
        manifest = json.loads(manifest_path.read_text())
        params = manifest.get("params")
        if not isinstance(params, dict):
            raise CheckpointError("manifest lacks a params table")
        tensors: dict[str, torch.Tensor] = {}
        for name, shape in params.items():
            path = directory / f"{name}.f32"
            if not path.exists():
                raise CheckpointError(f"missing tensor file {path.name}")
            flat = np.frombuffer(path.read_bytes(), dtype="<f4")
            expected = int(math.prod(shape)) if shape else 1
            if flat.size != expected:
                raise CheckpointError(
                    f"{path.name}: expected {expected} values, found {flat.size}"
                )
            tensors[name] = torch.from_numpy(flat.copy()).reshape(shape)
        return cls(manifest=manifest, tensors=tensors)


def checkpoint_from_module(module: torch.nn.Module, **manifest_fields) -> Checkpoint:
    tensors = {name: p.detach().clone() for name, p in module.state_dict().items()}
    return Checkpoint(manifest=dict(manifest_fields), tensors=tensors)


def load_module_state(module: torch.nn.Module, directory) -> dict:
    """Restore a module's parameters from a checkpoint directory.

    Returns the manifest so callers can inspect config/seed metadata.
    """
    ckpt = Checkpoint.load(directory)
    state = module.state_dict()
    missing = set(state) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(state)
    if missing or extra:
        raise CheckpointError(
            f"parameter mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
        )
    for name, tensor in ckpt.tensors.items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{name}: shape {tuple(tensor.shape)} does not match {tuple(state[name].shape)}"
            )
    module.load_state_dict(ckpt.tensors)
    return ckpt.manifest


@dataclass
class LossRow:
    epoch: int
    loss: float
    l1: float | None = None
    kl: float | None = None


@dataclass
class LossCurve:
    rows: list[LossRow] = field(default_factory=list)

    def append(self, epoch: int, loss: float, l1: float | None = None, kl: float | None = None):
        self.rows.append(LossRow(epoch=epoch, loss=loss, l1=l1, kl=kl))

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def save_csv(self, path) -> None:
        has_parts = any(r.l1 is not None or r.kl is not None for r in self.rows)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "l1", "kl"] if has_parts else ["epoch", "loss"])
            for r in self.rows:
                if has_parts:
                    writer.writerow(
                        [r.epoch, f"{r.loss:.8f}",
                         "" if r.l1 is None else f"{r.l1:.8f}",
                         "" if r.kl is None else f"{r.kl:.8f}"]
                    )
                else:
                    writer.writerow([r.epoch, f"{r.loss:.8f}"])

    @classmethod
    def load_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                curve.append(
                    epoch=int(row["epoch"]),
                    loss=float(row["loss"]),
                    l1=float(row["l1"]) if row.get("l1") else None,
                    kl=float(row["kl"]) if row.get("kl") else None,
                )
        return curve
