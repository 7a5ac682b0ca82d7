"""Command-line front end: synthesize data, train, evaluate, sweep, report.

Every command writes a run manifest next to its primary output (config
snapshot, seeds, input/output digests, tool version, timestamp) so a run can
be reproduced bit for bit from the recorded settings.

Exit codes: 0 success, 2 config/contract, 3 numeric failure, 4 IO,
5 total sweep failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import data as dt
from . import evaluation as ev
from . import model as mdl
from . import training as tr
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    MetricError,
    MstadError,
    NumericError,
    ReportError,
    ShapeMismatchError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_SWEEP_FAILED = 5


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, command: str, config: dict, seeds, inputs, outputs) -> str:
    manifest = {
        "tool": "mstad",
        "tool_version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "seeds": seeds,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return doc


def _parse_int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _model_config_from_args(args, feature_dim: int) -> mdl.ModelConfig:
    doc = _load_json_config(getattr(args, "model_config", None))
    doc.setdefault("feature_dim", feature_dim)
    if doc["feature_dim"] != feature_dim:
        raise ConfigError(
            f"config feature_dim {doc['feature_dim']} != data feature count {feature_dim}"
        )
    if getattr(args, "window", None) is not None:
        doc["window_len"] = args.window
    if getattr(args, "activation", None) is not None:
        doc["activation"] = args.activation
    if getattr(args, "scales", None) is not None:
        factors = _parse_int_list(args.scales)
        doc["scale_factors"] = factors
        doc["num_scales"] = len(factors)
    return mdl.ModelConfig.from_dict(doc)


def _train_config_from_args(args) -> tr.TrainConfig:
    doc = _load_json_config(getattr(args, "train_config", None))
    for flag, key in (
        ("lr", "initial_lr"),
        ("optimizer", "optimizer"),
        ("batch_size", "batch_size"),
        ("epochs", "max_epochs"),
        ("patience", "patience"),
        ("seed", "seed"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    return tr.TrainConfig.from_dict(doc)


def _prepare_windows(data_path, window_len: int, stride: int, split_ratio: float,
                     split_seed: int):
    """Shared pipeline: load, impute, slice, stratified split, normalize with
    training statistics only."""
    series = dt.load_csv(data_path)
    series = dt.impute_missing(series)
    windows = dt.slice_windows(series, window_len=window_len, stride=stride)
    train_ws, test_ws = dt.split_train_test(windows, ratio=split_ratio, seed=split_seed)
    stats = dt.window_feature_stats(train_ws, source="train")
    return (
        dt.normalize_windows(train_ws, stats),
        dt.normalize_windows(test_ws, stats),
        stats,
        series,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = dt.SyntheticSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    series = dt.generate_synthetic(spec)
    dt.write_csv(series, args.out)
    _write_manifest(args.out, "synth", spec.to_dict(), [spec.seed],
                    inputs=[args.spec], outputs=[args.out])
    print(f"wrote {series.length} rows x {series.feature_dim} features to {args.out} "
          f"(anomaly steps: {int(series.labels.sum())})")
    return EXIT_OK


def cmd_train(args) -> int:
    probe = dt.load_csv(args.data)
    mcfg = _model_config_from_args(args, probe.feature_dim)
    tcfg = _train_config_from_args(args)
    train_ws, test_ws, stats, _ = _prepare_windows(
        args.data, mcfg.window_len, args.stride, args.split_ratio, args.split_seed
    )
    params = mdl.init_params(mcfg, tcfg.seed)
    params, log = tr.train(params, train_ws, tcfg)
    extra = {
        "norm_stats": stats.to_dict(),
        "pipeline": {
            "stride": args.stride,
            "split_ratio": args.split_ratio,
            "split_seed": args.split_seed,
        },
        "train_config": tcfg.to_dict(),
        "stop_reason": log.stop_reason,
        "best_epoch": log.best_epoch,
    }
    mdl.save_checkpoint(params, args.out, extra=extra)
    outputs = [args.out]
    if args.log:
        log.to_csv(args.log)
        outputs.append(args.log)
    _write_manifest(args.out, "train",
                    {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                     "pipeline": extra["pipeline"]},
                    [tcfg.seed], inputs=[args.data], outputs=outputs)
    print(f"trained {len(log.entries)} epochs ({log.stop_reason}); "
          f"best epoch {log.best_epoch}, val_loss {min(e.val_loss for e in log.entries):.6f}, "
          f"checkpoint {args.out}")
    return EXIT_OK


def _select_eval_windows(args, params, extra):
    pipeline = extra.get("pipeline", {})
    stride = args.stride if args.stride is not None else pipeline.get("stride", 1)
    cfg = params.config
    series = dt.load_csv(args.data)
    series = dt.impute_missing(series)
    if series.feature_dim != cfg.feature_dim:
        raise ShapeMismatchError(
            f"checkpoint expects {cfg.feature_dim} features, data has {series.feature_dim}"
        )
    windows = dt.slice_windows(series, window_len=cfg.window_len, stride=stride)
    if args.split != "all":
        ratio = pipeline.get("split_ratio", 0.8)
        seed = pipeline.get("split_seed", 0)
        train_ws, test_ws = dt.split_train_test(windows, ratio=ratio, seed=seed)
        windows = train_ws if args.split == "train" else test_ws
    stats_doc = extra.get("norm_stats")
    if stats_doc is None:
        raise ConfigError("checkpoint lacks normalization statistics")
    return dt.normalize_windows(windows, dt.NormStats.from_dict(stats_doc))


def cmd_eval(args) -> int:
    params, extra = mdl.load_checkpoint(args.ckpt)
    windows = _select_eval_windows(args, params, extra)
    scores = mdl.score_windows(windows.windows, params)
    report = ev.report_from_scores(scores, windows.labels, args.threshold)
    ev.emit_report(report, args.out, args.format)
    outputs = [args.out]
    if args.scores:
        ev.write_score_dump(scores, windows.labels, args.scores)
        outputs.append(args.scores)
    _write_manifest(args.out, "eval",
                    {"threshold": args.threshold, "split": args.split,
                     "model": params.config.to_dict()},
                    [], inputs=[args.ckpt, args.data], outputs=outputs)
    print(f"n={report.n_samples} precision={report.precision:.6f} "
          f"recall={report.recall:.6f} auc={report.auc:.6f} f1={report.f1:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.kind not in ev.SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {args.kind!r}; valid: {ev.SWEEP_KINDS}")
    if args.grid is not None:
        raw = [v for v in args.grid.split(",") if v.strip() != ""]
        if args.kind in ("optimizer", "activation"):
            grid = [v.strip() for v in raw]
        elif args.kind == "ablation_scales":
            grid = [int(v) for v in raw]
        else:
            grid = [float(v) for v in raw]
    else:
        grid = list(ev.DEFAULT_GRIDS[args.kind])
    if not grid:
        raise ConfigError("sweep grid is empty")
    seeds = _parse_int_list(args.seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")

    probe = dt.load_csv(args.data)
    mcfg = _model_config_from_args(args, probe.feature_dim)
    tcfg = _train_config_from_args(args)
    train_ws, test_ws, stats, _ = _prepare_windows(
        args.data, mcfg.window_len, args.stride, args.split_ratio, args.split_seed
    )
    result = ev.run_sweep(args.kind, grid, mcfg, tcfg, train_ws, test_ws, seeds,
                          feature_std=stats.std, threshold=args.threshold,
                          jobs=args.jobs)
    ev.emit_report(result, args.out, args.format)
    row_manifests = []
    for i, row in enumerate(result.rows):
        row_out = f"{args.out}.row{i}"
        row_manifests.append(_write_manifest(
            row_out, f"sweep[{args.kind}={row.value}]",
            {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "value": row.value,
             "status": row.status},
            seeds, inputs=[args.data], outputs=[args.out]))
    _write_manifest(args.out, "sweep",
                    {"kind": args.kind, "grid": [str(g) for g in grid],
                     "model": mcfg.to_dict(), "train": tcfg.to_dict()},
                    seeds, inputs=[args.data], outputs=[args.out])
    ok_rows = sum(1 for r in result.rows if r.n_seeds > 0)
    for row in result.rows:
        print(f"{args.kind}={row.value}: f1={row.f1:.6f} auc={row.auc:.6f} [{row.status}]")
    if ok_rows == 0:
        print("every sweep row failed", file=sys.stderr)
        return EXIT_SWEEP_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    text = open(args.infile, "r", encoding="utf-8").read().lstrip()
    if text.startswith("{"):
        doc = json.loads(text)
        if "rows" in doc:
            raise ConfigError("sweep JSON to CSV conversion: re-run the sweep with --format csv")
        report = ev.MetricsReport.from_dict(doc)
    else:
        report = ev.parse_metrics_csv(args.infile)
    ev.emit_report(report, args.out, args.format)
    _write_manifest(args.out, "report", {"format": args.format}, [],
                    inputs=[args.infile], outputs=[args.out])
    print(f"rewrote {args.infile} as {args.format} at {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mstad",
        description="Multiscale-fusion transformer anomaly detection on telemetry windows",
    )
    parser.add_argument("--version", action="version", version=f"mstad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate synthetic telemetry CSV")
    p_synth.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p_synth.add_argument("--out", required=True, help="output CSV path")
    p_synth.add_argument("--seed", type=int, default=None, help="override spec seed")
    p_synth.set_defaults(fn=cmd_synth)

    def add_shared_train_flags(p):
        p.add_argument("--model-config", default=None, help="model config JSON")
        p.add_argument("--train-config", default=None, help="train config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lr", type=float, default=None, help="initial learning rate")
        p.add_argument("--optimizer", default=None,
                       choices=list(tr.OPTIMIZER_KINDS))
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--activation", default=None)
        p.add_argument("--scales", default=None, help="comma-separated factors, e.g. 1,2,4")
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--stride", type=int, default=1)
        p.add_argument("--split-ratio", type=float, default=0.8)
        p.add_argument("--split-seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train a model from a CSV")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True, help="checkpoint path")
    p_train.add_argument("--log", default=None, help="per-epoch CSV log path")
    add_shared_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a CSV")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True, help="report path")
    p_eval.add_argument("--scores", default=None, help="score-dump path")
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--format", default="csv", choices=list(ev.REPORT_FORMATS))
    p_eval.add_argument("--split", default="all", choices=["all", "train", "test"],
                        help="evaluate all windows or replay the checkpoint's split")
    p_eval.add_argument("--stride", type=int, default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    p_sweep.add_argument("--kind", required=True, choices=list(ev.SWEEP_KINDS))
    p_sweep.add_argument("--data", required=True)
    p_sweep.add_argument("--out", required=True, help="table path")
    p_sweep.add_argument("--grid", default=None, help="comma-separated values")
    p_sweep.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--threshold", type=float, default=0.5)
    p_sweep.add_argument("--format", default="csv", choices=list(ev.REPORT_FORMATS))
    add_shared_train_flags(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_report = sub.add_parser("report", help="re-emit a metrics report in another format")
    p_report.add_argument("--in", dest="infile", required=True)
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--format", default="csv", choices=list(ev.REPORT_FORMATS))
    p_report.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, ShapeMismatchError, MetricError,
            ReportError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MstadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
