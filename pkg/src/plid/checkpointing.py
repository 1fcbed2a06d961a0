"""Checkpoint persistence: manifest.json plus matrix containers.

A checkpoint directory holds a manifest (config snapshot, epoch, metrics,
serialized RNG states) and one matrix container per tensor: learnable
parameters under params/, optimizer moments under opt/, and the best-so-far
parameters under best_params/ when the checkpoint carries training state.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .errors import LoadError, ValidationError
from .matrixio import read_matrix, write_matrix

FORMAT = "plid-checkpoint-v1"


@dataclass
class Checkpoint:
    """Model parameters with enough context to evaluate or resume.

    `parameters` maps state-dict names to arrays. Optimizer and RNG state are
    present only on checkpoints meant for resumption; `best_*` carry the
    best-validation snapshot alongside the live training state.
    """

    config: TrainConfig
    epoch: int
    parameters: dict[str, np.ndarray]
    metrics: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    rng_state: dict | None = None
    best_epoch: int | None = None
    best_metrics: dict | None = None
    best_parameters: dict[str, np.ndarray] | None = None
    history: list[dict] = field(default_factory=list)

    def best_checkpoint(self) -> "Checkpoint":
        """Self-contained checkpoint of the best-validation parameters."""
        if self.best_parameters is None:
            return Checkpoint(self.config, self.epoch, dict(self.parameters),
                              dict(self.metrics), history=list(self.history))
        return Checkpoint(
            self.config, self.best_epoch if self.best_epoch is not None else self.epoch,
            dict(self.best_parameters), dict(self.best_metrics or {}),
            history=list(self.history),
        )


def _save_tensor_group(root: Path, sub: str, tensors: dict[str, np.ndarray]) -> dict:
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        rel = f"{sub}/{name}.mat"
        write_matrix(root / rel, arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr)
        index[name] = {"file": rel, "shape": list(arr.shape)}
    return index


def _load_tensor_group(root: Path, index: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, meta in index.items():
        mat = read_matrix(root / meta["file"])
        shape = tuple(meta["shape"])
        if int(np.prod(shape)) != mat.size:
            raise ValidationError(
                f"checkpoint tensor {name}: stored shape {shape} does not match payload of {mat.size} values"
            )
        out[name] = mat.reshape(shape)
    return out


def _encode_rng(rng_state: dict | None) -> dict | None:
    if rng_state is None:
        return None
    out = {}
    for key, value in rng_state.items():
        if key == "torch":
            out[key] = base64.b64encode(bytes(value)).decode("ascii")
        else:
            out[key] = value
    return out


def _decode_rng(raw: dict | None) -> dict | None:
    if raw is None:
        return None
    out = {}
    for key, value in raw.items():
        if key == "torch":
            out[key] = torch.frombuffer(
                bytearray(base64.b64decode(value)), dtype=torch.uint8
            ).clone()
        else:
            out[key] = value
    return out


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "parameters": _save_tensor_group(out_dir, "params", ckpt.parameters),
        "rng": _encode_rng(ckpt.rng_state),
        "history": ckpt.history,
    }
    if ckpt.optimizer_state is not None:
        tensors = {}
        steps = {}
        for name, entry in ckpt.optimizer_state.items():
            steps[name] = entry["step"]
            tensors[f"{name}.exp_avg"] = entry["exp_avg"]
            tensors[f"{name}.exp_avg_sq"] = entry["exp_avg_sq"]
        manifest["optimizer"] = {
            "steps": steps,
            "tensors": _save_tensor_group(out_dir, "opt", tensors),
        }
    if ckpt.best_parameters is not None:
        manifest["best"] = {
            "epoch": ckpt.best_epoch,
            "metrics": ckpt.best_metrics,
            "parameters": _save_tensor_group(out_dir, "best_params", ckpt.best_parameters),
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out_dir


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise LoadError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise LoadError(f"unrecognized checkpoint format in {manifest_path}")
    config = TrainConfig.from_dict(manifest["config"])
    parameters = _load_tensor_group(path, manifest["parameters"])
    optimizer_state = None
    if "optimizer" in manifest:
        tensors = _load_tensor_group(path, manifest["optimizer"]["tensors"])
        optimizer_state = {}
        for name, step in manifest["optimizer"]["steps"].items():
            optimizer_state[name] = {
                "step": step,
                "exp_avg": tensors[f"{name}.exp_avg"],
                "exp_avg_sq": tensors[f"{name}.exp_avg_sq"],
            }
    best_parameters = best_metrics = None
    best_epoch = None
    if "best" in manifest:
        best_epoch = manifest["best"]["epoch"]
        best_metrics = manifest["best"]["metrics"]
        best_parameters = _load_tensor_group(path, manifest["best"]["parameters"])
    return Checkpoint(
        config=config,
        epoch=manifest["epoch"],
        parameters=parameters,
        metrics=manifest.get("metrics", {}),
        optimizer_state=optimizer_state,
        rng_state=_decode_rng(manifest.get("rng")),
        best_epoch=best_epoch,
        best_metrics=best_metrics,
        best_parameters=best_parameters,
        history=manifest.get("history", []),
    )
