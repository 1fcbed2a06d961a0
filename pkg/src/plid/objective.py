"""Loss functions and logit fusion.

The classification loss is an upper bound on the negative log-likelihood
under the joint class Gaussians: a temperature-scaled cross entropy whose
competitor logits carry additive pairwise covariance margins. For linear
logits v.t with t ~ N(mu, Sigma) the bound is exact:

    -log E[softmax(v.t_y / tau)] <= -log exp(h_y/tau) / sum_k exp((h_k + m_ky)/tau)

with h_k = v.mu_k and m_ky = v^T A_ky v / (2 tau). Primitive losses use the
same form with margins f(v)^T A f(v) (no temperature halving). Stochastic
logit mixup draws one Beta coefficient per optimization step and blends the
direct compositional logits with the recomposed ones before the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError


@dataclass(frozen=True)
class BetaPrior:
    """Beta(a, b) prior over the mixing coefficient."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValidationError(f"Beta prior parameters must be positive, got ({self.a}, {self.b})")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


@dataclass
class LogitBundle:
    """Per-batch logits produced by one forward pass."""

    h_comp: Tensor      # (B, C) cosine logits against class means
    h_rc_flat: Tensor   # (B, C) recomposed logits gathered at the class pairs
    h_mixed: Tensor     # (B, C) convex combination of the two
    h_state: Tensor     # (B, |S|)
    h_object: Tensor    # (B, |O|)
    lambda_used: float


@dataclass
class LossReport:
    loss_y: float
    loss_s: float
    loss_o: float
    total: float
    weights: tuple[float, float]


def csp_logits(v: Tensor, means: Tensor) -> Tensor:
    """Baseline compositional scorer: cosine of the image feature against each
    class embedding (a plain dot product since both are unit vectors)."""
    return torch.clamp(v @ means.T, -1.0, 1.0)


def upper_bound_loss(logits: Tensor, margins: Tensor, targets: Tensor, tau: float) -> Tensor:
    """Per-sample upper-bound cross entropy.

    logits, margins: (B, C); margins must vanish at each sample's target.
    Computed as logsumexp((logits + margins)/tau) - logits[target]/tau, which
    performs the max subtraction after the margins are added.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if logits.dim() == 1:
        logits = logits[None, :]
        margins = margins[None, :]
        targets = targets.reshape(1)
    if not torch.isfinite(logits).all():
        raise ValidationError("non-finite logits passed to upper_bound_loss")
    if not torch.isfinite(margins).all():
        raise ValidationError("non-finite margins passed to upper_bound_loss")
    at_target = margins.gather(1, targets[:, None])
    if (at_target != 0).any():
        raise ValidationError("margins must be zero at the target class")
    arg = (logits + margins) / tau
    target_arg = logits.gather(1, targets[:, None])[:, 0] / tau
    return torch.logsumexp(arg, dim=1) - target_arg


def sample_lambda(prior: BetaPrior, rng: np.random.Generator, mode: str = "train") -> float:
    """One mixing coefficient: a Beta draw per optimization step in training,
    the prior mean in evaluation."""
    if mode == "train":
        return float(rng.beta(prior.a, prior.b))
    if mode == "eval":
        return prior.mean
    raise ValidationError(f"unknown mode {mode!r}")


def mix_logits(h_comp: Tensor, h_rc_flat: Tensor, lam: float) -> Tensor:
    """Convex combination (1 - lam) * h_comp + lam * h_rc_flat.

    The endpoints return the pure path unchanged so that lam = 0 and lam = 1
    are exact, not merely within rounding.
    """
    if h_comp.shape != h_rc_flat.shape:
        raise ValidationError(
            f"logit shapes differ: {tuple(h_comp.shape)} vs {tuple(h_rc_flat.shape)}"
        )
    if not (0.0 <= lam <= 1.0):
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return h_comp.clone()
    if lam == 1.0:
        return h_rc_flat.clone()
    return (1.0 - lam) * h_comp + lam * h_rc_flat


def total_loss(bundle: LogitBundle, comp_margins: Tensor, state_margins: Tensor,
               object_margins: Tensor, class_targets: Tensor, state_targets: Tensor,
               object_targets: Tensor, tau: float,
               primitive_weight: float | tuple[float, float]) -> tuple[Tensor, LossReport]:
    """Assemble the compositional and primitive upper-bound losses.

    total = L_y + w_s * L_s + w_o * L_o, each term a batch mean. The
    compositional loss runs on the mixed logits; the primitive losses on the
    raw primitive logits.
    """
    if isinstance(primitive_weight, tuple):
        w_s, w_o = primitive_weight
    else:
        w_s = w_o = float(primitive_weight)
    loss_y = upper_bound_loss(bundle.h_mixed, comp_margins, class_targets, tau).mean()
    loss_s = upper_bound_loss(bundle.h_state, state_margins, state_targets, tau).mean()
    loss_o = upper_bound_loss(bundle.h_object, object_margins, object_targets, tau).mean()
    total = loss_y + w_s * loss_s + w_o * loss_o
    report = LossReport(
        loss_y=float(loss_y.detach()), loss_s=float(loss_s.detach()),
        loss_o=float(loss_o.detach()), total=float(total.detach()), weights=(w_s, w_o),
    )
    return total, report
