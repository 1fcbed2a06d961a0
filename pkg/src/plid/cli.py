"""Command-line entry point.

Subcommands: synth (generate a synthetic dataset), train, eval, gradcheck,
report. Every command that produces a run directory writes a manifest with
the resolved configuration and a content hash of its inputs. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .checkpointing import load_checkpoint
from .config import TrainConfig
from .corpus import Dataset, make_synthetic_dataset
from .errors import ConfigError, PlidError, ValidationError
from .evaluation import MetricsReport, evaluate, plot_curves
from .gradcheck import gradient_check
from .training import resume, train


def hash_inputs(paths: list[Path], params: dict | None = None) -> str:
    """Content hash over input files (and resolved parameters), stable across
    reruns; directory inputs are walked in sorted order."""
    digest = hashlib.sha256()
    if params is not None:
        digest.update(json.dumps(params, sort_keys=True, default=str).encode("utf-8"))
    files: list[Path] = []
    for path in paths:
        if path is None:
            continue
        path = Path(path)
        if path.is_dir():
            files.extend(sorted(p for p in path.rglob("*") if p.is_file() and p.name != "manifest.json"))
        elif path.is_file():
            files.append(path)
    for f in sorted(files):
        digest.update(f.name.encode("utf-8"))
        digest.update(f.read_bytes())
    return digest.hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict | None,
                       config_path: str | None, seed: int | None,
                       inputs_hash: str, artifacts: list[str],
                       started_at: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config,
        "seed": seed,
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "inputs_hash": inputs_hash,
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if not (0.0 < args.seen_frac <= 1.0):
        raise ConfigError(f"--seen-frac must be in (0, 1], got {args.seen_frac}")
    started = _now()
    params = {
        "states": args.states, "objects": args.objects, "seen_frac": args.seen_frac,
        "samples_per_pair": args.samples_per_pair,
        "descriptions_per_pair": args.descriptions_per_pair, "seed": args.seed,
    }
    try:
        root = make_synthetic_dataset(
            args.out, args.states, args.objects, args.seen_frac,
            args.samples_per_pair, args.descriptions_per_pair, args.seed,
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = Dataset.load(root)
    n_seen = len(dataset.split.seen)
    n_unseen = len(dataset.split.unseen_val) + len(dataset.split.unseen_test)
    write_run_manifest(
        Path(args.out), "synth", None, None, args.seed,
        hash_inputs([], params), ["vocabulary.json", "splits.json", "descriptions/", "samples.csv"],
        started,
    )
    print(f"dataset written to {root}: {n_seen} seen / {n_unseen} unseen pairs, "
          f"{len(dataset.samples)} samples")
    return 0


def cmd_train(args) -> int:
    started = _now()
    cfg = _load_config(args)
    dataset = Dataset.load(args.data)
    out = Path(args.out)
    if args.resume:
        ckpt = load_checkpoint(Path(args.resume))
        best = resume(ckpt, dataset, cfg, backend=args.backend, out_dir=out)
    else:
        best = train(dataset, cfg, backend=args.backend, out_dir=out)
    write_run_manifest(
        out, "train", cfg.to_dict(), args.config, cfg.seed,
        hash_inputs([Path(args.data)] + ([Path(args.config)] if args.config else []),
                    {"backend": args.backend}),
        ["best/", "last/", "log.csv"],
        started,
    )
    auc = best.metrics.get("val_auc")
    print(f"training done: best epoch {best.epoch}"
          + (f", validation AUC {auc:.4f}" if auc == auc and auc is not None else ""))
    return 0


def cmd_eval(args) -> int:
    started = _now()
    ckpt = load_checkpoint(Path(args.ckpt))
    dataset = Dataset.load(args.data)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    reports = evaluate(ckpt, dataset, out_dir=out, backend=args.backend,
                       settings=(args.setting,))
    write_run_manifest(
        out, "eval", ckpt.config.to_dict(), None, ckpt.config.seed,
        hash_inputs([Path(args.data), Path(args.ckpt)], {"setting": args.setting}),
        ["report.json", "curve.csv", "curve.png"],
        started,
    )
    _print_reports(reports)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    dataset = Dataset.load(args.data)
    result = gradient_check(dataset, cfg, backend=args.backend, num_samples=args.samples)
    print(f"{'tensor':40s} {'max rel err':>12s} {'max abs err':>12s}")
    for name, (rel, abs_err) in sorted(result.per_tensor.items()):
        print(f"{name:40s} {rel:12.3e} {abs_err:12.3e}")
    status = "PASS" if result.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {result.max_rel_error:.3e} "
          f"(threshold {result.threshold:.1e})")
    return 0 if result.passed else 1


def _print_reports(reports: dict[str, MetricsReport]) -> None:
    print(f"{'setting':12s} {'best_seen':>10s} {'best_unseen':>12s} {'best_hm':>10s} {'auc':>10s}")
    for name, rep in reports.items():
        print(f"{name:12s} {rep.best_seen:10.2f} {rep.best_unseen:12.2f} "
              f"{rep.best_hm:10.2f} {rep.auc:10.4f}")


def cmd_report(args) -> int:
    run = Path(args.run)
    report_path = run / "report.json"
    if not report_path.is_file():
        raise ValidationError(f"no report.json under {run}")
    payload = json.loads(report_path.read_text(encoding="utf-8"))
    if "bias_grid" in payload:
        reports = {payload["setting"]: MetricsReport.from_dict(payload)}
    else:
        reports = {
            key: MetricsReport.from_dict(value)
            for key, value in payload.items()
            if isinstance(value, dict) and "auc" in value
        }
    if not reports:
        raise ValidationError(f"report.json under {run} holds no metrics")
    _print_reports(reports)
    plot_curves(run / "curve.png", reports)
    print(f"curve plot refreshed at {run / 'curve.png'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plid",
        description="Compositional zero-shot learning with language-informed distributions",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--seen-frac", type=float, required=True)
    p.add_argument("--samples-per-pair", type=int, default=20)
    p.add_argument("--descriptions-per-pair", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and checkpoint the best model")
    p.add_argument("--config", help="JSON config file (strict keys)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--backend", choices=["synthetic", "precomputed"], default="synthetic")
    p.add_argument("--resume", help="resume from this last/ checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", choices=["closed", "open"], default="closed")
    p.add_argument("--out", help="report directory (default: <ckpt>/../eval)")
    p.add_argument("--backend", choices=["synthetic", "precomputed"], default="synthetic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON config file (strict keys)")
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["synthetic", "precomputed"], default="synthetic")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render metric tables and the sweep plot")
    p.add_argument("--run", required=True, help="directory containing report.json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PlidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
