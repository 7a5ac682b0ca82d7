"""Metrics, model evaluation, and the hyperparameter-sensitivity sweep harness.

Sweeps hold everything fixed except the swept value, retrain per seed, and
aggregate per-seed reports by their mean. Noise and anomaly-ratio sweeps
transform the window sets before training; the scale ablation swaps the
number of model scales (S=1 standing in for the plain-transformer baseline).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dt
from . import model as mdl
from . import training as tr
from .data import WindowSet
from .errors import ConfigError, ContractError, MetricError, ReportError

SWEEP_KINDS = ("learning_rate", "optimizer", "activation", "noise", "anomaly_ratio",
               "ablation_scales")

DEFAULT_GRIDS = {
    "learning_rate": [1e-3, 3e-4, 2e-4, 1e-4],
    "optimizer": ["adagrad", "sgd", "adam", "adamw"],
    "activation": ["relu", "leaky_relu", "elu", "gelu"],
    "noise": [0.0, 0.05, 0.1, 0.25, 0.5],
    "anomaly_ratio": [0.01, 0.05, 0.10, 0.20],
    "ablation_scales": [1, 3],
}


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Exact counts; a score equal to the threshold predicts positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} disagree")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def precision_recall_f1(counts: ConfusionCounts) -> tuple:
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def auc(scores, labels) -> float:
    """Rank statistic: P(random positive scores above random negative), ties
    worth half. Sort-based, contract-equal to the pairwise definition."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (rank_pos + rank_pos + (j - i))
        rank_pos += j - i + 1
        i = j + 1
    rank_sum = ranks[np.asarray(labels) == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P*N) oracle: concordant pairs plus half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC undefined for single-class input")
    wins = ties = 0
    for p in pos:
        wins += int(np.sum(p > neg))
        ties += int(np.sum(p == neg))
    return (wins + 0.5 * ties) / (pos.size * neg.size)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "auc": self.auc, "tp": self.tp, "fp": self.fp, "tn": self.tn,
            "fn": self.fn, "threshold": self.threshold, "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def report_from_scores(scores, labels, threshold: float = 0.5) -> MetricsReport:
    counts = confusion(scores, labels, threshold)
    precision, recall, f1 = precision_recall_f1(counts)
    return MetricsReport(
        precision=precision, recall=recall, f1=f1, auc=auc(scores, labels),
        tp=counts.tp, fp=counts.fp, tn=counts.tn, fn=counts.fn,
        threshold=threshold, n_samples=counts.total,
    )


def evaluate(params: mdl.ModelParams, test_ws: WindowSet,
             threshold: float = 0.5) -> MetricsReport:
    """Deterministic report on a window set (dropout off)."""
    scores = mdl.score_windows(test_ws.windows, params)
    return report_from_scores(scores, test_ws.labels, threshold)


# ---------------------------------------------------------------------------
# sweep harness


@dataclass
class SweepRow:
    value: object
    precision: float
    recall: float
    auc: float
    f1: float
    n_seeds: int
    status: str = "ok"
    seed_reports: list = field(default_factory=list)


@dataclass
class SweepResult:
    parameter: str
    rows: list
    seeds: list

    def __post_init__(self):
        if not self.rows:
            raise ContractError("sweep produced no rows")


def _apply_value(kind: str, value, model_cfg: mdl.ModelConfig, train_cfg: tr.TrainConfig):
    if kind == "learning_rate":
        return model_cfg, replace(train_cfg, initial_lr=float(value))
    if kind == "optimizer":
        return model_cfg, replace(train_cfg, optimizer=str(value))
    if kind == "activation":
        return replace(model_cfg, activation=str(value)), train_cfg
    if kind == "ablation_scales":
        s = int(value)
        factors = mdl.default_scale_factors(s)
        return replace(model_cfg, num_scales=s, scale_factors=factors), train_cfg
    if kind in ("noise", "anomaly_ratio"):
        return model_cfg, train_cfg
    raise ConfigError(f"unknown sweep kind {kind!r}; valid: {SWEEP_KINDS}")


def _run_trial(kind: str, value, seed: int, model_cfg: mdl.ModelConfig,
               train_cfg: tr.TrainConfig, train_ws: WindowSet, test_ws: WindowSet,
               feature_std: np.ndarray, threshold: float) -> MetricsReport:
    m_cfg, t_cfg = _apply_value(kind, value, model_cfg, train_cfg)
    t_cfg = replace(t_cfg, seed=seed)
    if kind == "noise":
        sigma = float(value)
        train_ws = dt.inject_noise(train_ws, sigma, feature_std, tr.derive_seed(seed, 31))
        test_ws = dt.inject_noise(test_ws, sigma, feature_std, tr.derive_seed(seed, 32))
    elif kind == "anomaly_ratio":
        ratio = float(value)
        train_ws = dt.resample_anomaly_ratio(train_ws, ratio, tr.derive_seed(seed, 41))
        test_ws = dt.resample_anomaly_ratio(test_ws, ratio, tr.derive_seed(seed, 42))
    params = mdl.init_params(m_cfg, seed)
    params, _ = tr.train(params, train_ws, t_cfg)
    return evaluate(params, test_ws, threshold)


def run_sweep(kind: str, grid, model_cfg: mdl.ModelConfig, train_cfg: tr.TrainConfig,
              train_ws: WindowSet, test_ws: WindowSet, seeds,
              feature_std: np.ndarray | None = None, threshold: float = 0.5,
              jobs: int = 1) -> SweepResult:
    """One row per grid value, rows in grid order; per-row failures are
    recorded in the status column and the sweep continues."""
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; valid: {SWEEP_KINDS}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid must be nonempty")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    if feature_std is None:
        feature_std = dt.window_feature_stats(train_ws).std

    tasks = [(value, seed) for value in grid for seed in seeds]
    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                (value, seed): pool.submit(
                    _run_trial, kind, value, seed, model_cfg, train_cfg,
                    train_ws, test_ws, feature_std, threshold,
                )
                for value, seed in tasks
            }
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:  # per-trial failure -> row status
                    results[key] = exc
    else:
        for value, seed in tasks:
            try:
                results[(value, seed)] = _run_trial(
                    kind, value, seed, model_cfg, train_cfg, train_ws, test_ws,
                    feature_std, threshold,
                )
            except Exception as exc:
                results[(value, seed)] = exc

    rows = []
    for value in grid:
        reports, errors = [], []
        for seed in seeds:
            out = results[(value, seed)]
            if isinstance(out, MetricsReport):
                reports.append(out)
            else:
                errors.append(f"seed {seed}: {out}")
        if reports:
            rows.append(SweepRow(
                value=value,
                precision=float(np.mean([r.precision for r in reports])),
                recall=float(np.mean([r.recall for r in reports])),
                auc=float(np.mean([r.auc for r in reports])),
                f1=float(np.mean([r.f1 for r in reports])),
                n_seeds=len(reports),
                status="ok" if not errors else "partial: " + "; ".join(errors),
                seed_reports=reports,
            ))
        else:
            rows.append(SweepRow(
                value=value, precision=math.nan, recall=math.nan, auc=math.nan,
                f1=math.nan, n_seeds=0, status="failed: " + "; ".join(errors),
            ))
    return SweepResult(parameter=kind, rows=rows, seeds=seeds)


# ---------------------------------------------------------------------------
# report emission (CSV column order and the 6-decimal format are the schema)

REPORT_FORMATS = ("csv", "json")
SWEEP_CSV_HEADER = "value,precision,recall,auc,f1,n_seeds,status"
METRICS_CSV_HEADER = "precision,recall,auc,f1,threshold,tp,fp,tn,fn,n_samples"


def _f6(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6f}"


def emit_report(obj, path, fmt: str = "csv") -> None:
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"unknown report format {fmt!r}; valid: {REPORT_FORMATS}")
    if isinstance(obj, SweepResult):
        if not obj.rows:
            raise ReportError("sweep result has no rows to write")
        if fmt == "csv":
            lines = [SWEEP_CSV_HEADER]
            for r in obj.rows:
                lines.append(
                    f"{r.value},{_f6(r.precision)},{_f6(r.recall)},{_f6(r.auc)},"
                    f"{_f6(r.f1)},{r.n_seeds},{r.status}"
                )
            text = "\n".join(lines) + "\n"
        else:
            text = json.dumps({
                "parameter": obj.parameter,
                "seeds": obj.seeds,
                "rows": [{
                    "value": r.value, "precision": _nan_none(r.precision),
                    "recall": _nan_none(r.recall), "auc": _nan_none(r.auc),
                    "f1": _nan_none(r.f1), "n_seeds": r.n_seeds, "status": r.status,
                    "per_seed": [sr.to_dict() for sr in r.seed_reports],
                } for r in obj.rows],
            }, indent=2)
    elif isinstance(obj, MetricsReport):
        if fmt == "csv":
            text = (
                METRICS_CSV_HEADER + "\n"
                + f"{_f6(obj.precision)},{_f6(obj.recall)},{_f6(obj.auc)},{_f6(obj.f1)},"
                + f"{_f6(obj.threshold)},{obj.tp},{obj.fp},{obj.tn},{obj.fn},{obj.n_samples}\n"
            )
        else:
            text = json.dumps(obj.to_dict(), indent=2)
    else:
        raise ReportError(f"cannot emit object of type {type(obj).__name__}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _nan_none(x: float):
    return None if not math.isfinite(x) else x


def parse_metrics_csv(path) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) != 2 or lines[0] != METRICS_CSV_HEADER:
        raise ReportError(f"{path}: not a metrics CSV")
    vals = lines[1].split(",")
    return MetricsReport(
        precision=float(vals[0]), recall=float(vals[1]), auc=float(vals[2]),
        f1=float(vals[3]), threshold=float(vals[4]), tp=int(vals[5]), fp=int(vals[6]),
        tn=int(vals[7]), fn=int(vals[8]), n_samples=int(vals[9]),
    )


def parse_sweep_csv(path) -> list:
    """Rows as dicts (values stay strings; numeric fields parsed)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != SWEEP_CSV_HEADER:
        raise ReportError(f"{path}: not a sweep CSV")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",", 6)
        rows.append({
            "value": parts[0], "precision": float(parts[1]), "recall": float(parts[2]),
            "auc": float(parts[3]), "f1": float(parts[4]), "n_seeds": int(parts[5]),
            "status": parts[6],
        })
    return rows


def write_score_dump(scores, labels, path) -> None:
    """One `score label` pair per line, full float precision, for auditing."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s, y in zip(scores, labels):
            f.write(f"{float(s)!r} {int(y)}\n")


def read_score_dump(path) -> tuple:
    scores, labels = [], []
    with open(path, "r", encoding="utf-8") as f:
        for ln in f:
            if not ln.strip():
                continue
            s, y = ln.split()
            scores.append(float(s))
            labels.append(int(y))
    return np.array(scores), np.array(labels)
