"""Optimization loop: AdamW with step-decayed learning rate, per-epoch
margin refresh, validation-AUC model selection, and deterministic seeding.

Determinism contract: two runs with the same config and seed produce
identical loss traces, and train(k) followed by resume for m more epochs is
bit-identical to train(k+m). Everything stochastic flows from three streams
derived from the config seed: the shuffle generator, the mixing-coefficient
generator, and the torch RNG that feeds dropout; all three are serialized
into resumable checkpoints along with the optimizer moments.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import torch

from .checkpointing import Checkpoint, save_checkpoint
from .config import TrainConfig
from .corpus import Dataset
from .errors import TrainingError, ValidationError
from .evaluation import validation_metrics
from .model import ModelBundle
from .objective import BetaPrior, sample_lambda, upper_bound_loss


def _validate_for_training(dataset: Dataset, config: TrainConfig) -> None:
    for rec in dataset.samples:
        if rec.split == "train" and rec.pair not in dataset.split.seen:
            raise ValidationError(
                f"train sample {rec.image_key} labeled with unseen pair {rec.pair}"
            )
    m = dataset.corpus.descriptions_per_pair
    if m != config.descriptions_per_class:
        raise ValidationError(
            f"config expects {config.descriptions_per_class} descriptions per class, corpus has {m}"
        )


def _named_parameters(bundle: ModelBundle) -> list[tuple[str, torch.nn.Parameter]]:
    return list(bundle.model.named_parameters())


def _make_optimizer(bundle: ModelBundle, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in _named_parameters(bundle)]
    return torch.optim.AdamW(params, lr=config.base_lr, weight_decay=config.weight_decay)


def _export_optimizer(bundle: ModelBundle, optimizer: torch.optim.AdamW) -> dict:
    out = {}
    for idx, (name, param) in enumerate(_named_parameters(bundle)):
        state = optimizer.state.get(param)
        if state is None:
            continue
        out[name] = {
            "step": float(state["step"]),
            "exp_avg": state["exp_avg"].detach().numpy().copy(),
            "exp_avg_sq": state["exp_avg_sq"].detach().numpy().copy(),
        }
    return out


def _restore_optimizer(bundle: ModelBundle, optimizer: torch.optim.AdamW,
                       saved: dict | None) -> None:
    if not saved:
        return
    for name, param in _named_parameters(bundle):
        if name not in saved:
            continue
        entry = saved[name]
        optimizer.state[param] = {
            "step": torch.tensor(float(entry["step"])),
            "exp_avg": torch.as_tensor(entry["exp_avg"], dtype=param.dtype).reshape(param.shape),
            "exp_avg_sq": torch.as_tensor(entry["exp_avg_sq"], dtype=param.dtype).reshape(param.shape),
        }


def _rng_bundle(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed & 0xFFFFFFFF)
    data_seed, lambda_seed, torch_seed = ss.spawn(3)
    torch.manual_seed(int(torch_seed.generate_state(1)[0]))
    return np.random.default_rng(data_seed), np.random.default_rng(lambda_seed)


def _export_rng(data_rng, lambda_rng) -> dict:
    return {
        "data": data_rng.bit_generator.state,
        "lambda": lambda_rng.bit_generator.state,
        "torch": torch.get_rng_state().numpy().tobytes(),
    }


def _restore_rng(state: dict) -> tuple[np.random.Generator, np.random.Generator]:
    data_rng = np.random.default_rng()
    data_rng.bit_generator.state = state["data"]
    lambda_rng = np.random.default_rng()
    lambda_rng.bit_generator.state = state["lambda"]
    torch_state = state["torch"]
    if isinstance(torch_state, (bytes, bytearray)):
        torch_state = torch.frombuffer(bytearray(torch_state), dtype=torch.uint8).clone()
    torch.set_rng_state(torch_state)
    return data_rng, lambda_rng


def _metrics_dict(report) -> dict:
    if report is None:
        return {"val_auc": float("nan"), "val_hm": float("nan"),
                "val_seen": float("nan"), "val_unseen": float("nan")}
    return {"val_auc": report.auc, "val_hm": report.best_hm,
            "val_seen": report.best_seen, "val_unseen": report.best_unseen}


def _better(candidate: dict, incumbent: dict | None) -> bool:
    if incumbent is None:
        return True
    cand, best = candidate.get("val_auc"), incumbent.get("val_auc")
    if cand is None or math.isnan(cand):
        return True  # no validation signal: latest parameters win
    if best is None or math.isnan(best):
        return True
    return cand > best


def write_log(out_dir: Path, history: list[dict]) -> None:
    with open(out_dir / "log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_y", "loss_s", "loss_o", "lr", "val_auc"])
        for row in history:
            writer.writerow([
                row["epoch"],
                "" if row.get("loss_y") is None else row["loss_y"],
                "" if row.get("loss_s") is None else row["loss_s"],
                "" if row.get("loss_o") is None else row["loss_o"],
                "" if row.get("lr") is None else row["lr"],
                row.get("val_auc", ""),
            ])


def compute_batch_loss(bundle: ModelBundle, keys, state_ids, object_ids,
                       lam: float) -> tuple[torch.Tensor, dict]:
    """Full training loss for one batch; shared by the optimizer step and the
    finite-difference gradient checker."""
    cfg = bundle.config
    margin_set = bundle.margins()
    logit_bundle, v, fs_v, fo_v, targets = bundle.forward_batch(
        keys, state_ids, object_ids, lam
    )
    comp_m, state_m, object_m = bundle.batch_margins(
        v, fs_v, fo_v, targets, state_ids, object_ids, margin_set
    )
    loss_y = upper_bound_loss(logit_bundle.h_mixed, comp_m, targets, cfg.tau).mean()
    if cfg.use_decomposition:
        loss_s = upper_bound_loss(logit_bundle.h_state, state_m, state_ids, cfg.tau).mean()
        loss_o = upper_bound_loss(logit_bundle.h_object, object_m, object_ids, cfg.tau).mean()
        w = cfg.primitive_loss_weight
    else:
        loss_s = torch.zeros((), dtype=loss_y.dtype)
        loss_o = torch.zeros((), dtype=loss_y.dtype)
        w = 0.0
    total = loss_y + w * loss_s + w * loss_o
    parts = {"loss_y": loss_y, "loss_s": loss_s, "loss_o": loss_o}
    return total, parts


def _train_step(bundle: ModelBundle, optimizer, keys, state_ids, object_ids,
                lam: float, epoch: int, step: int) -> dict:
    bundle.model.train()
    total, parts = compute_batch_loss(bundle, keys, state_ids, object_ids, lam)
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise TrainingError(f"{name} became non-finite at epoch {epoch}, step {step}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {"loss_y": float(parts["loss_y"].detach()), "loss_s": float(parts["loss_s"].detach()),
            "loss_o": float(parts["loss_o"].detach()), "total": float(total.detach())}


def _run_epochs(bundle: ModelBundle, optimizer, data_rng, lambda_rng,
                start_epoch: int, history: list[dict], best: dict | None,
                out_dir: Path | None) -> Checkpoint:
    cfg = bundle.config
    dataset = bundle.dataset
    prior = BetaPrior(*cfg.beta_prior)
    train_samples = dataset.samples_of("train")
    keys = [s.image_key for s in train_samples]
    s_ids_all = torch.as_tensor([s.state_id for s in train_samples], dtype=torch.long)
    o_ids_all = torch.as_tensor([s.object_id for s in train_samples], dtype=torch.long)

    if best is None and start_epoch == 0:
        init_metrics = _metrics_dict(validation_metrics(bundle))
        best = {"epoch": 0, "metrics": init_metrics, "parameters": bundle.export_parameters()}
        history.append({"epoch": 0, "loss_y": None, "loss_s": None, "loss_o": None,
                        "lr": None, "val_auc": init_metrics["val_auc"]})
    current_metrics = dict(best["metrics"]) if best else {}

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = cfg.learning_rate_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        bundle.margins(refresh=True)
        order = data_rng.permutation(len(train_samples))
        sums = {"loss_y": 0.0, "loss_s": 0.0, "loss_o": 0.0}
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lam = sample_lambda(prior, lambda_rng, "train")
            stats = _train_step(
                bundle, optimizer,
                [keys[i] for i in idx], s_ids_all[idx], o_ids_all[idx],
                lam, epoch, start // cfg.batch_size,
            )
            for k in sums:
                sums[k] += stats[k] * len(idx)
            count += len(idx)
        metrics = _metrics_dict(validation_metrics(bundle))
        current_metrics = metrics
        if _better(metrics, best["metrics"] if best else None):
            best = {"epoch": epoch, "metrics": metrics, "parameters": bundle.export_parameters()}
        history.append({
            "epoch": epoch,
            "loss_y": sums["loss_y"] / max(count, 1),
            "loss_s": sums["loss_s"] / max(count, 1),
            "loss_o": sums["loss_o"] / max(count, 1),
            "lr": lr,
            "val_auc": metrics["val_auc"],
        })

    last = Checkpoint(
        config=cfg,
        epoch=cfg.epochs,
        parameters=bundle.export_parameters(),
        metrics=current_metrics,
        optimizer_state=_export_optimizer(bundle, optimizer),
        rng_state=_export_rng(data_rng, lambda_rng),
        best_epoch=best["epoch"],
        best_metrics=best["metrics"],
        best_parameters=best["parameters"],
        history=history,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(last, out_dir / "last")
        save_checkpoint(last.best_checkpoint(), out_dir / "best")
        write_log(out_dir, history)
    return last.best_checkpoint()


def train(dataset: Dataset, config: TrainConfig, backend="synthetic",
          out_dir: str | Path | None = None) -> Checkpoint:
    """Train from scratch; returns the best-validation checkpoint.

    When `out_dir` is given, writes `best/` and `last/` checkpoint
    directories plus `log.csv`.
    """
    _validate_for_training(dataset, config)
    data_rng, lambda_rng = _rng_bundle(config.seed)
    bundle = ModelBundle(dataset, config, backend=backend)
    optimizer = _make_optimizer(bundle, config)
    out = Path(out_dir) if out_dir is not None else None
    return _run_epochs(bundle, optimizer, data_rng, lambda_rng,
                       start_epoch=0, history=[], best=None, out_dir=out)


def resume(checkpoint: Checkpoint, dataset: Dataset, config: TrainConfig,
           backend="synthetic", out_dir: str | Path | None = None) -> Checkpoint:
    """Continue training from a resumable checkpoint up to config.epochs.

    The checkpoint must carry optimizer and RNG state (the `last/` directory
    written by train). Restores all three RNG streams so the continuation is
    bit-identical to an uninterrupted run.
    """
    if checkpoint.optimizer_state is None or checkpoint.rng_state is None:
        raise ValidationError("checkpoint does not carry optimizer/rng state; use the last/ checkpoint")
    for field in ("embed_dim", "prompt_length", "descriptions_per_class"):
        if getattr(checkpoint.config, field) != getattr(config, field):
            raise ValidationError(
                f"config field {field} differs from the checkpoint "
                f"({getattr(config, field)} vs {getattr(checkpoint.config, field)})"
            )
    _validate_for_training(dataset, config)
    if config.epochs < checkpoint.epoch:
        raise ValidationError(
            f"config.epochs={config.epochs} is before the checkpoint epoch {checkpoint.epoch}"
        )
    bundle = ModelBundle(dataset, config, backend=backend, parameters=checkpoint.parameters)
    optimizer = _make_optimizer(bundle, config)
    _restore_optimizer(bundle, optimizer, checkpoint.optimizer_state)
    data_rng, lambda_rng = _restore_rng(checkpoint.rng_state)
    best = None
    if checkpoint.best_parameters is not None:
        best = {"epoch": checkpoint.best_epoch, "metrics": checkpoint.best_metrics,
                "parameters": checkpoint.best_parameters}
    history = list(checkpoint.history)
    out = Path(out_dir) if out_dir is not None else None
    return _run_epochs(bundle, optimizer, data_rng, lambda_rng,
                       start_epoch=checkpoint.epoch, history=history, best=best, out_dir=out)
