"""Central finite-difference verification of the analytic gradients.

Builds the model in float64 with dropout disabled and per-step margin
recomputation on, perturbs every learnable tensor slightly off its
initialization (the zero-initialized head output layers sit at a point where
several gradients vanish identically, which would make the check vacuous),
and compares autograd against (f(x+h) - f(x-h)) / 2h elementwise.

The relative error denominator is floored at REL_ERROR_FLOOR: central
differences at h ~ 1e-6 resolve the loss to roughly 1e-9 absolute, so
gradients below the floor are compared absolutely (a genuinely wrong
gradient of any magnitude above ~1e-8 still trips the threshold).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import TrainConfig
from .corpus import Dataset
from .model import ModelBundle
from .objective import BetaPrior
from .training import compute_batch_loss

REL_ERROR_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    per_tensor: dict[str, tuple[float, float]]  # name -> (max relative, max absolute)
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def gradient_check(dataset: Dataset, config: TrainConfig, backend="synthetic",
                   num_samples: int = 2, step: float = 1e-6,
                   perturbation: float = 0.02, threshold: float = 1e-4) -> GradCheckResult:
    cfg = config.replace(recompute_every_step=True, attention_dropout=0.0)
    bundle = ModelBundle(dataset, cfg, backend=backend, dtype=torch.float64)
    model = bundle.model
    model.train()

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    with torch.no_grad():
        for param in model.parameters():
            param.add_(perturbation * torch.randn(param.shape, generator=gen, dtype=param.dtype))

    train_samples = dataset.samples_of("train")[:num_samples]
    if not train_samples:
        raise ValueError("dataset has no train samples to check against")
    keys = [s.image_key for s in train_samples]
    s_ids = torch.as_tensor([s.state_id for s in train_samples], dtype=torch.long)
    o_ids = torch.as_tensor([s.object_id for s in train_samples], dtype=torch.long)
    lam = BetaPrior(*cfg.beta_prior).mean  # fixed coefficient: the loss must be deterministic here

    def closure() -> float:
        total, _ = compute_batch_loss(bundle, keys, s_ids, o_ids, lam)
        return float(total)

    total, _ = compute_batch_loss(bundle, keys, s_ids, o_ids, lam)
    model.zero_grad()
    total.backward()

    per_tensor: dict[str, tuple[float, float]] = {}
    max_rel = 0.0
    for name, param in model.named_parameters():
        analytic = param.grad.detach().clone().reshape(-1)
        flat = param.data.reshape(-1)
        worst_rel = 0.0
        worst_abs = 0.0
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = float(flat[i])
                h = step * max(1.0, abs(orig))
                flat[i] = orig + h
                f_plus = closure()
                flat[i] = orig - h
                f_minus = closure()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = float(analytic[i])
                abs_err = abs(a - numeric)
                rel_err = abs_err / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
                worst_rel = max(worst_rel, rel_err)
                worst_abs = max(worst_abs, abs_err)
        per_tensor[name] = (worst_rel, worst_abs)
        max_rel = max(max_rel, worst_rel)
    return GradCheckResult(per_tensor, max_rel, threshold)
