"""Command-line entry points: ingest, synth, train, validate, predict.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric failure during training. Errors are emitted as a single JSON
object on stderr so callers can parse them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import training
from .config import load_run_config, save_resolved
from .errors import ConfigError, DataError, NonFiniteLossError
from .ingest import build_manifest, load_manifest, save_exclusions, save_manifest
from .synthetic import generate_dataset, write_split_manifests


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ichseq", description="slice-sequence hemorrhage classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="scan a directory tree into a slice manifest")
    p_ingest.add_argument("--root", required=True, help="directory containing raw slices")
    p_ingest.add_argument("--out", required=True, help="manifest CSV to write")
    p_ingest.add_argument("--labels", default=None, help="optional label CSV (slice_id + 6 class columns)")
    p_ingest.add_argument("--exclusions", default=None, help="exclusion report path (default: next to manifest)")

    p_synth = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--studies", type=int, default=20)
    p_synth.add_argument("--slices", type=int, default=8)
    p_synth.add_argument("--size", type=int, default=64, help="square slice edge in pixels")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--val-studies", type=int, default=0, help="also write train.csv/val.csv with this split")

    p_train = sub.add_parser("train", help="train a model from a YAML config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p_train.add_argument("--seed", type=int, default=None, help="shortcut for --set train.seed=N")
    p_train.add_argument("--out", required=True, help="run directory")

    p_val = sub.add_parser("validate", help="compute metrics for a checkpoint on a labeled manifest")
    p_val.add_argument("--checkpoint", required=True)
    p_val.add_argument("--manifest", required=True)
    p_val.add_argument("--out", default=None, help="write the metric report JSON here")

    p_pred = sub.add_parser("predict", help="write slice- or scan-level prediction CSVs")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--manifest", required=True)
    p_pred.add_argument("--level", choices=("slice", "scan"), default="slice")
    p_pred.add_argument("--out", required=True)
    return parser


def _cmd_ingest(args) -> int:
    records, exclusions = build_manifest(args.root, labels_csv=args.labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(out, records)
    excl_path = Path(args.exclusions) if args.exclusions else out.with_name("exclusions.csv")
    save_exclusions(excl_path, exclusions)
    n_studies = len({r.study_id for r in records})
    print(f"ingest: {len(records)} slices across {n_studies} studies -> {out} ({len(exclusions)} excluded)")
    return 0


def _cmd_synth(args) -> int:
    manifest = generate_dataset(
        args.out,
        n_studies=args.studies,
        n_slices=args.slices,
        height=args.size,
        width=args.size,
        seed=args.seed,
    )
    msg = f"synth: {args.studies} studies x {args.slices} slices -> {manifest}"
    if args.val_studies:
        train_csv, val_csv = write_split_manifests(load_manifest(manifest), Path(args.out), args.val_studies)
        msg += f" (split: {train_csv.name}, {val_csv.name})"
    print(msg)
    return 0


def _cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_run_config(args.config, overrides)
    if cfg.data.train_manifest is None or cfg.data.val_manifest is None:
        raise ConfigError("config must set data.train_manifest and data.val_manifest")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_resolved(out_dir / "config.resolved", cfg)
    result = training.train(cfg, cfg.data.train_manifest, cfg.data.val_manifest, out_dir)
    print(
        f"train: best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch} "
        f"-> {result.checkpoint_path}"
    )
    return 0


def _cmd_validate(args) -> int:
    report = training.validate(args.checkpoint, args.manifest)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json() + "\n")
    auc_any = report.per_class_auc.get("any")
    auc_str = f"{auc_any:.6f}" if auc_any is not None else "undefined"
    print(
        f"validate: weighted log loss {report.weighted_log_loss:.6f}, any-class AUC {auc_str} "
        f"({report.n_slices} slices, {report.n_scans} scans)"
    )
    return 0


def _cmd_predict(args) -> int:
    out = training.predict(args.checkpoint, args.manifest, args.level, args.out)
    print(f"predict: {args.level}-level predictions -> {out}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "validate": _cmd_validate,
    "predict": _cmd_predict,
}


def _emit_error(code: int, exc: Exception) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diagnostics = getattr(exc, "diagnostics", None)
    if diagnostics:
        payload["diagnostics"] = diagnostics
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _emit_error(2, exc)
    except DataError as exc:
        return _emit_error(3, exc)
    except NonFiniteLossError as exc:
        return _emit_error(4, exc)


if __name__ == "__main__":
    sys.exit(main())
