"""Closed- and open-world evaluation protocol.

Scoring fuses compositional cosine logits with recomposed primitive logits at
the Beta-prior mean. A calibration bias added to the unseen-class logits is
swept over a grid (plus masking sentinels at both infinities); the sweep
yields best seen / best unseen accuracy, the best harmonic mean, and the
area under the unseen-versus-seen curve. Open-world candidate sets come from
feasibility filtering with the threshold calibrated on the validation split.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpointing import Checkpoint
from .corpus import Dataset, Pair, feasibility_scores, feasible_compositions
from .encoders import cosine_similarity_tables
from .errors import ValidationError
from .model import ModelBundle


@dataclass
class MetricsReport:
    """Bias-sweep metrics; accuracies in percent, AUC on the percent scale
    (area under the percent-percent curve divided by 100)."""

    best_seen: float
    best_unseen: float
    best_hm: float
    auc: float
    setting: str
    bias_grid: list[tuple[float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(x: float):
            if math.isinf(x):
                return "inf" if x > 0 else "-inf"
            return x

        return {
            "setting": self.setting,
            "best_seen": self.best_seen,
            "best_unseen": self.best_unseen,
            "best_hm": self.best_hm,
            "auc": self.auc,
            "bias_grid": [[enc(b), s, u] for b, s, u in self.bias_grid],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        grid = [(float(b), float(s), float(u)) for b, s, u in data.get("bias_grid", [])]
        return cls(
            best_seen=float(data["best_seen"]),
            best_unseen=float(data["best_unseen"]),
            best_hm=float(data["best_hm"]),
            auc=float(data["auc"]),
            setting=data["setting"],
            bias_grid=grid,
        )


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen + unseen <= 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def bias_sweep(logits: np.ndarray, labels: np.ndarray, seen_mask: np.ndarray,
               grid_size: int = 41, setting: str = "closed") -> MetricsReport:
    """Sweep a calibration bias added to unseen-candidate logits.

    logits: (n_samples, n_candidates) float array. labels: candidate index of
    each sample's true class, or -1 if the true class is not a candidate.
    seen_mask: per-candidate flag, True for seen compositions. The grid spans
    plus/minus the largest observed seen/unseen logit gap, with two sentinel
    entries that mask the other partition outright (realizing biases of
    minus and plus infinity).
    """
    if grid_size < 2:
        raise ValidationError(f"grid_size must be >= 2, got {grid_size}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValidationError("logits and labels disagree on the number of samples")
    if seen_mask.shape[0] != logits.shape[1]:
        raise ValidationError("seen_mask length must equal the number of candidates")
    if not seen_mask.any() or seen_mask.all():
        raise ValidationError("candidate set must contain both seen and unseen compositions")

    sample_is_seen = np.where(labels >= 0, seen_mask[np.clip(labels, 0, None)], False)
    n_seen = int(sample_is_seen.sum())
    n_unseen = int((~sample_is_seen).sum())
    if n_seen == 0 or n_unseen == 0:
        raise ValidationError(
            f"evaluation needs samples of both partitions, got seen={n_seen}, unseen={n_unseen}"
        )

    unseen_cols = ~seen_mask

    def accuracies(adjusted: np.ndarray) -> tuple[float, float]:
        preds = adjusted.argmax(axis=1)
        correct = preds == labels
        seen_acc = 100.0 * correct[sample_is_seen].mean()
        unseen_acc = 100.0 * correct[~sample_is_seen].mean()
        return float(seen_acc), float(unseen_acc)

    max_seen = np.max(np.where(seen_mask[None, :], logits, -np.inf), axis=1)
    max_unseen = np.max(np.where(unseen_cols[None, :], logits, -np.inf), axis=1)
    gap = float(np.max(np.abs(max_seen - max_unseen)))
    if not math.isfinite(gap) or gap == 0.0:
        gap = 1.0

    grid: list[tuple[float, float, float]] = []
    masked_unseen = logits.copy()
    masked_unseen[:, unseen_cols] = -np.inf
    grid.append((-math.inf, *accuracies(masked_unseen)))
    for b in np.linspace(-gap, gap, grid_size):
        adjusted = logits + b * unseen_cols[None, :]
        grid.append((float(b), *accuracies(adjusted)))
    masked_seen = logits.copy()
    masked_seen[:, seen_mask] = -np.inf
    grid.append((math.inf, *accuracies(masked_seen)))

    best_seen = max(s for _, s, _ in grid)
    best_unseen = max(u for _, _, u in grid)
    best_hm = max(harmonic_mean(s, u) for _, s, u in grid)

    seen_axis = np.array([s for _, s, _ in grid])
    unseen_axis = np.array([u for _, _, u in grid])
    order = np.argsort(seen_axis, kind="stable")
    auc = float(np.trapz(unseen_axis[order], seen_axis[order])) / 100.0

    return MetricsReport(best_seen, best_unseen, best_hm, auc, setting, grid)


def _candidate_labels(samples, candidates: list[Pair]) -> np.ndarray:
    index = {pair: i for i, pair in enumerate(candidates)}
    return np.array([index.get(rec.pair, -1) for rec in samples], dtype=np.int64)


def score_test_set(bundle: ModelBundle, samples, candidates: list[Pair],
                   mix_weight: float | None = None,
                   allow_synthesis: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fused logits for samples against a candidate list.

    Returns (logits, labels, seen_mask). Candidates without stored
    descriptions raise unless synthesis is allowed, in which case template
    descriptions are generated on the fly.
    """
    missing = [p for p in candidates if p not in bundle.dataset.corpus.texts]
    if missing and not allow_synthesis:
        raise ValidationError(f"candidates missing descriptions: {missing}")
    keys = [rec.image_key for rec in samples]
    logits = bundle.score_candidates(keys, candidates, mix_weight=mix_weight,
                                     allow_synthesis=allow_synthesis)
    labels = _candidate_labels(samples, candidates)
    seen_mask = np.array([pair in bundle.dataset.split.seen for pair in candidates])
    return logits, labels, seen_mask


def validation_metrics(bundle: ModelBundle) -> MetricsReport | None:
    """Closed-world sweep on the validation partition, or None when the
    validation set cannot support one (missing samples of either side)."""
    samples = bundle.dataset.samples_of("val")
    if not samples:
        return None
    candidates = bundle.dataset.split.closed_world_candidates("val")
    try:
        logits, labels, seen_mask = score_test_set(bundle, samples, candidates)
        return bias_sweep(logits, labels, seen_mask,
                          grid_size=bundle.config.bias_grid_size, setting="closed-val")
    except ValidationError:
        return None


def calibrate_feasibility_threshold(bundle: ModelBundle) -> tuple[float, dict]:
    """Pick the feasibility threshold maximizing validation harmonic mean.

    Candidate thresholds are the unique feasibility scores of non-seen pairs
    (plus minus infinity for "keep everything"); ties resolve to the most
    permissive threshold. Falls back to minus infinity when the validation
    split cannot score."""
    vocab, split = bundle.vocab, bundle.dataset.split
    sims = cosine_similarity_tables(vocab, bundle.text_encoder)
    scores = feasibility_scores(vocab, split, sims)
    val_samples = bundle.dataset.samples_of("val")
    all_pairs = sorted(vocab.all_pairs())
    if not val_samples:
        return -math.inf, sims
    logits, labels, seen_mask = score_test_set(
        bundle, val_samples, all_pairs, allow_synthesis=True
    )
    non_seen_scores = sorted({
        float(scores[s, o]) for (s, o) in all_pairs if (s, o) not in split.seen
    })
    thresholds = [-math.inf] + non_seen_scores
    best_threshold, best_hm = -math.inf, -1.0
    for th in thresholds:
        keep = np.array([
            pair in split.seen or scores[pair] >= th for pair in all_pairs
        ])
        if keep.all() and th != -math.inf:
            continue
        sub_candidates = [p for p, k in zip(all_pairs, keep) if k]
        remap = {pair: i for i, pair in enumerate(sub_candidates)}
        sub_logits = logits[:, keep]
        sub_labels = np.array([
            remap.get(rec.pair, -1) for rec in val_samples
        ], dtype=np.int64)
        sub_mask = seen_mask[keep]
        try:
            report = bias_sweep(sub_logits, sub_labels, sub_mask,
                                grid_size=bundle.config.bias_grid_size, setting="open-val")
        except ValidationError:
            continue
        if report.best_hm > best_hm:
            best_hm, best_threshold = report.best_hm, th
    return best_threshold, sims


def evaluate(checkpoint: Checkpoint, dataset: Dataset, out_dir: str | Path | None = None,
             backend="synthetic", settings: tuple[str, ...] = ("closed", "open"),
             bundle: ModelBundle | None = None) -> dict[str, MetricsReport]:
    """Run the requested evaluation settings on the test partition.

    Closed world scores against seen plus unseen-test pairs; open world
    against the feasibility-filtered Cartesian product with the threshold
    calibrated on validation. Writes report.json, curve.csv and curve.png
    when an output directory is given.
    """
    for setting in settings:
        if setting not in ("closed", "open"):
            raise ValidationError(f"unknown evaluation setting {setting!r}")
    if bundle is None:
        bundle = ModelBundle(dataset, checkpoint.config, backend=backend,
                             parameters=checkpoint.parameters)
    test_samples = dataset.samples_of("test")
    grid_size = bundle.config.bias_grid_size
    reports: dict[str, MetricsReport] = {}
    threshold = None
    for setting in settings:
        if setting == "closed":
            candidates = dataset.split.closed_world_candidates("test")
            logits, labels, seen_mask = score_test_set(bundle, test_samples, candidates)
        else:
            threshold, sims = calibrate_feasibility_threshold(bundle)
            candidates = sorted(feasible_compositions(
                bundle.vocab, dataset.split, sims, threshold
            ))
            logits, labels, seen_mask = score_test_set(
                bundle, test_samples, candidates, allow_synthesis=True
            )
        reports[setting] = bias_sweep(logits, labels, seen_mask,
                                      grid_size=grid_size, setting=setting)
    if out_dir is not None:
        emit_reports(Path(out_dir), reports, bundle.config.content_hash(), threshold)
    return reports


def emit_reports(out_dir: Path, reports: dict[str, MetricsReport],
                 config_hash: str, threshold: float | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        setting, report = next(iter(reports.items()))
        payload: dict = dict(report.to_dict())
    else:
        payload = {name: r.to_dict() for name, r in reports.items()}
        payload["setting"] = "+".join(reports)
    payload["config_hash"] = config_hash
    if threshold is not None:
        payload["feasibility_threshold"] = threshold if math.isfinite(threshold) else "-inf"
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    with open(out_dir / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "bias", "seen_acc", "unseen_acc"])
        for name, report in reports.items():
            for b, s, u in report.bias_grid:
                writer.writerow([name, b, s, u])
    plot_curves(out_dir / "curve.png", reports)


def plot_curves(path: Path, reports: dict[str, MetricsReport]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, report in reports.items():
        xs = [s for _, s, _ in report.bias_grid]
        ys = [u for _, _, u in report.bias_grid]
        order = np.argsort(xs)
        ax.plot(np.asarray(xs)[order], np.asarray(ys)[order], marker=".",
                label=f"{name} (AUC {report.auc:.2f})")
    ax.set_xlabel("seen accuracy (%)")
    ax.set_ylabel("unseen accuracy (%)")
    ax.set_title("Calibration bias sweep")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
