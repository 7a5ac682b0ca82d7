"""Telemetry ingestion, preprocessing, windowing, and a synthetic generator.

The synthetic generator stands in for full-scale trace ingestion: per-channel
baselines are a diurnal sinusoid plus AR(1) jitter and measurement noise, and
injected anomalies cover fast spikes, mid-length level shifts, and slow
drifts whose per-step increment sits below the noise floor (so they only
become separable at coarse temporal scales, while spikes sit above it).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, GenerationError, ParseError, SplitError

LABEL_COLUMN = "label"

ANOMALY_KINDS = ("spike", "level_shift", "drift")
SPIKE_STEPS = (1, 3)
SHIFT_STEPS = (20, 60)
DRIFT_STEPS = (100, 300)


@dataclass
class RawSeries:
    """Labeled multivariate series; NaN marks a missing cell."""

    feature_names: list
    matrix: np.ndarray          # [N, d_in], float64
    labels: np.ndarray          # [N], int 0/1
    sample_interval: float | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise DataError(f"series needs at least one feature column, got {self.matrix.shape}")
        if self.labels.shape != (self.matrix.shape[0],):
            raise DataError(
                f"label length {self.labels.shape} != row count {self.matrix.shape[0]}"
            )
        if len(self.feature_names) != self.matrix.shape[1]:
            raise DataError("feature_names do not match matrix columns")
        bad = set(np.unique(self.labels)) - {0, 1}
        if bad:
            raise DataError(f"labels must be 0/1, found {sorted(bad)}")

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class WindowSet:
    """Fixed-length windows with window-level labels and source offsets."""

    windows: np.ndarray   # [n, T, d_in]
    labels: np.ndarray    # [n], int 0/1
    offsets: np.ndarray   # [n], start row of each window in the source series

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        n = self.windows.shape[0]
        if self.labels.shape != (n,) or self.offsets.shape != (n,):
            raise DataError("windows, labels and offsets must agree in length")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def anomaly_ratio(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.windows[idx], self.labels[idx], self.offsets[idx])


@dataclass
class NormStats:
    """Per-feature normalization statistics with a provenance tag."""

    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64), d.get("source", "train"))


# ---------------------------------------------------------------------------
# CSV interface: UTF-8, header row, `label` column of {0,1}, missing = empty


def load_csv(path) -> RawSeries:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if LABEL_COLUMN not in header:
            raise ParseError(f"{path}: no '{LABEL_COLUMN}' column in header {header}")
        label_idx = header.index(LABEL_COLUMN)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            feats = []
            for i, cell in enumerate(row):
                cell = cell.strip()
                if i == label_idx:
                    if cell not in ("0", "1"):
                        raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {cell!r}")
                    labels.append(int(cell))
                elif cell == "":
                    feats.append(np.nan)  # empty cell = missing
                else:
                    try:
                        feats.append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"{path}:{lineno}: non-numeric cell {cell!r} in column "
                            f"{header[i]!r}"
                        ) from None
            rows.append(feats)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    matrix = np.array(rows, dtype=np.float64)
    return RawSeries(feature_names, matrix, np.array(labels))


def write_csv(series: RawSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(series.feature_names + [LABEL_COLUMN]) + "\n")
        for row, label in zip(series.matrix, series.labels):
            cells = ["" if math.isnan(v) else repr(float(v)) for v in row]
            cells.append(str(int(label)))
            f.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# preprocessing


def impute_missing(series: RawSeries) -> RawSeries:
    """Linear interpolation inside a column; edges take the nearest observed
    value. A column with no observations cannot be imputed."""
    matrix = series.matrix.copy()
    for c in range(matrix.shape[1]):
        col = matrix[:, c]
        missing = np.isnan(col)
        if not missing.any():
            continue
        observed = np.flatnonzero(~missing)
        if observed.size == 0:
            raise DataError(f"column {series.feature_names[c]!r} is entirely missing")
        idx = np.flatnonzero(missing)
        col[idx] = np.interp(idx, observed, col[observed])
    return RawSeries(list(series.feature_names), matrix, series.labels.copy(),
                     series.sample_interval)


def z_normalize(series: RawSeries, stats: NormStats | None = None,
                source: str = "train") -> tuple:
    """Per-column (x - mean) / std. Stats are computed here only when not
    supplied; supply training stats when normalizing held-out data."""
    if np.isnan(series.matrix).any():
        raise DataError("normalize called with missing cells; impute first")
    if stats is None:
        mean = series.matrix.mean(axis=0)
        std = series.matrix.std(axis=0)
        stats = NormStats(mean, std, source)
    normalized = np.zeros_like(series.matrix)
    for c in range(series.matrix.shape[1]):
        if stats.std[c] < 1e-12:
            warnings.warn(
                f"column {series.feature_names[c]!r} has ~zero variance; set to 0",
                stacklevel=2,
            )
            continue
        normalized[:, c] = (series.matrix[:, c] - stats.mean[c]) / stats.std[c]
    out = RawSeries(list(series.feature_names), normalized, series.labels.copy(),
                    series.sample_interval)
    return out, stats


def window_feature_stats(ws: WindowSet, source: str = "train") -> NormStats:
    """Per-feature stats over every value in a window set (leakage-free when
    called on the training split only)."""
    flat = ws.windows.reshape(-1, ws.windows.shape[-1])
    return NormStats(flat.mean(axis=0), flat.std(axis=0), source)


def normalize_windows(ws: WindowSet, stats: NormStats) -> WindowSet:
    std = np.where(stats.std < 1e-12, 1.0, stats.std)
    scaled = (ws.windows - stats.mean) / std
    scaled[..., stats.std < 1e-12] = 0.0
    return WindowSet(scaled, ws.labels.copy(), ws.offsets.copy())


# ---------------------------------------------------------------------------
# windowing and splitting


def slice_windows(series: RawSeries, window_len: int = 60, stride: int = 1) -> WindowSet:
    """Fixed windows; a window is anomalous iff any covered step is."""
    if window_len < 1 or stride < 1:
        raise ConfigError(f"window_len/stride must be positive, got {window_len}/{stride}")
    n = series.length
    if n < window_len:
        raise DataError(f"series of length {n} shorter than window {window_len}")
    if np.isnan(series.matrix).any():
        raise DataError("series has missing cells; impute before slicing")
    view = np.lib.stride_tricks.sliding_window_view(series.matrix, window_len, axis=0)
    windows = np.ascontiguousarray(view[::stride].transpose(0, 2, 1))
    label_view = np.lib.stride_tricks.sliding_window_view(series.labels, window_len)
    labels = label_view[::stride].max(axis=1)
    offsets = np.arange(0, n - window_len + 1, stride)
    return WindowSet(windows, labels, offsets)


def split_train_test(ws: WindowSet, ratio: float = 0.8, seed: int = 0) -> tuple:
    """Stratified random split; each class contributes round(ratio * n_c)
    windows to the training side."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    labels = ws.labels
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < 2:
            raise SplitError(f"class {cls} has {members.size} window(s); need at least 2")
        perm = rng.permutation(members)
        n_train = int(round(ratio * members.size))
        n_train = min(max(n_train, 1), members.size - 1)  # keep both classes on both sides
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ws.subset(train), ws.subset(test)


# ---------------------------------------------------------------------------
# synthetic telemetry


@dataclass
class SyntheticSpec:
    """Controls for the synthetic cloud-telemetry generator."""

    length: int
    feature_dim: int = 4
    seed: int = 0
    anomaly_ratio: float = 0.10
    type_mix: tuple = (0.5, 0.3, 0.2)   # spike, level_shift, drift event probabilities
    noise_sigma: float = 0.05
    diurnal_period: int = 1440
    diurnal_amp: float = 1.0            # scales the per-channel sinusoid amplitude
    jitter: float = 0.15                # stationary AR(1) std
    sample_interval: float = 60.0

    def __post_init__(self):
        self.type_mix = tuple(float(p) for p in self.type_mix)
        self.validate()

    def validate(self) -> None:
        if self.length < 1:
            raise ConfigError(f"length must be positive, got {self.length}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if not 0.0 <= self.anomaly_ratio <= 0.5:
            raise ConfigError(f"anomaly_ratio must lie in [0, 0.5], got {self.anomaly_ratio}")
        if len(self.type_mix) != 3 or any(p < 0 for p in self.type_mix):
            raise ConfigError(f"type_mix needs 3 nonnegative entries, got {self.type_mix}")
        if abs(sum(self.type_mix) - 1.0) > 1e-9:
            raise ConfigError(f"type_mix must sum to 1, got {self.type_mix}")
        if self.noise_sigma < 0 or self.jitter < 0 or self.diurnal_amp < 0:
            raise ConfigError("noise_sigma, jitter and diurnal_amp must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "anomaly_ratio": self.anomaly_ratio,
            "type_mix": list(self.type_mix),
            "noise_sigma": self.noise_sigma,
            "diurnal_period": self.diurnal_period,
            "diurnal_amp": self.diurnal_amp,
            "jitter": self.jitter,
            "sample_interval": self.sample_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "type_mix" in d:
            d["type_mix"] = tuple(d["type_mix"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _sample_events(spec: SyntheticSpec, rng: np.random.Generator) -> list:
    """Place non-overlapping (kind, start, duration) events until the labeled
    step count lands within 20% of the target ratio."""
    target = spec.anomaly_ratio * spec.length
    if target == 0:
        return []
    lo, hi = 0.8 * target, 1.2 * target
    occupied = np.zeros(spec.length, dtype=bool)
    events, total = [], 0
    margin = 5  # keep events visually distinct
    failures = 0
    while total < target and failures < 2000:
        kind = ANOMALY_KINDS[rng.choice(3, p=spec.type_mix)]
        lo_d, hi_d = {"spike": SPIKE_STEPS, "level_shift": SHIFT_STEPS, "drift": DRIFT_STEPS}[kind]
        dur = int(rng.integers(lo_d, hi_d + 1))
        if total + dur > hi:
            # too long for the remaining budget; a spike always fits if anything does
            if total >= lo:
                break
            kind, dur = "spike", int(rng.integers(SPIKE_STEPS[0], SPIKE_STEPS[1] + 1))
            if total + dur > hi:
                break
        if dur + 2 * margin >= spec.length:
            failures += 1
            continue
        start = int(rng.integers(margin, spec.length - dur - margin))
        if occupied[max(0, start - margin):start + dur + margin].any():
            failures += 1
            continue
        occupied[start:start + dur] = True
        events.append((kind, start, dur))
        total += dur
    if not lo <= total <= hi:
        raise GenerationError(
            f"could not realize anomaly ratio {spec.anomaly_ratio} over length "
            f"{spec.length} (placed {total} of {target:.0f} steps)"
        )
    return events


def generate_synthetic(spec: SyntheticSpec) -> RawSeries:
    """Deterministic per seed. Channel baselines: offset + diurnal sinusoid +
    AR(1) jitter + white noise. Event amplitudes scale with the per-step
    fluctuation so spikes clear the noise floor while drift increments stay
    under it."""
    rng = np.random.default_rng(spec.seed)
    n, d = spec.length, spec.feature_dim
    t = np.arange(n)

    matrix = np.zeros((n, d))
    for c in range(d):
        offset = rng.uniform(-0.5, 0.5)
        amp = spec.diurnal_amp * rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * math.pi)
        base = offset + amp * np.sin(2 * math.pi * t / spec.diurnal_period + phase)
        rho = 0.9
        innov = rng.normal(0.0, spec.jitter * math.sqrt(1 - rho * rho), size=n)
        ar = np.empty(n)
        prev = rng.normal(0.0, spec.jitter)
        for i in range(n):
            prev = rho * prev + innov[i]
            ar[i] = prev
        noise = rng.normal(0.0, spec.noise_sigma, size=n)
        matrix[:, c] = base + ar + noise

    labels = np.zeros(n, dtype=np.int64)
    fluct = math.hypot(spec.jitter, spec.noise_sigma)
    for kind, start, dur in _sample_events(spec, rng):
        labels[start:start + dur] = 1
        n_channels = int(rng.integers(1, max(2, d // 2 + 1)))
        channels = rng.choice(d, size=n_channels, replace=False)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if kind == "spike":
            amp = sign * rng.uniform(4.0, 7.0) * fluct
            profile = np.full(dur, amp)
        elif kind == "level_shift":
            amp = sign * rng.uniform(1.5, 3.0) * fluct
            profile = np.full(dur, amp)
        else:  # drift: ramp whose per-step increment sits below the noise floor
            amp = sign * rng.uniform(2.0, 4.0) * fluct
            profile = np.linspace(0.0, amp, dur)
        for c in channels:
            matrix[start:start + dur, c] += profile

    names = [f"metric_{i}" for i in range(d)]
    return RawSeries(names, matrix, labels, spec.sample_interval)


# ---------------------------------------------------------------------------
# perturbations for the sensitivity sweeps


def inject_noise(ws: WindowSet, sigma: float, feature_std: np.ndarray,
                 seed: int = 0) -> WindowSet:
    """Additive iid Gaussian noise, per-feature scale sigma * training std.
    Labels untouched; sigma zero is the identity."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return ws
    feature_std = np.asarray(feature_std, dtype=np.float64)
    if feature_std.shape != (ws.windows.shape[-1],):
        raise ConfigError(
            f"feature_std shape {feature_std.shape} != feature count {ws.windows.shape[-1]}"
        )
    rng = np.random.default_rng(seed)
    noisy = ws.windows + rng.normal(0.0, 1.0, size=ws.windows.shape) * (sigma * feature_std)
    return WindowSet(noisy, ws.labels.copy(), ws.offsets.copy())


def resample_anomaly_ratio(ws: WindowSet, target_ratio: float, seed: int = 0) -> WindowSet:
    """Subsample one class (never duplicate) so the positive-window ratio is
    as close to the target as integers allow. Targets above 0.5 would make
    anomalies the majority and are rejected."""
    if not 0.0 < target_ratio <= 0.5:
        raise DataError(
            f"target ratio {target_ratio} not achievable by subsampling (must be in (0, 0.5])"
        )
    pos = np.flatnonzero(ws.labels == 1)
    neg = np.flatnonzero(ws.labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise DataError("resampling needs both classes present")
    current = pos.size / (pos.size + neg.size)
    rng = np.random.default_rng(seed)

    def closest_count(ideal: float, limit: int, other: int, count_is_pos: bool) -> int:
        best_k, best_err = None, None
        for k in {math.floor(ideal), math.ceil(ideal)}:
            k = min(max(k, 1), limit)
            ratio = (k / (k + other)) if count_is_pos else (pos.size / (pos.size + k))
            err = abs(ratio - target_ratio)
            if best_err is None or err < best_err:
                best_k, best_err = k, err
        return best_k

    if target_ratio < current:
        k_pos = closest_count(target_ratio * neg.size / (1 - target_ratio),
                              pos.size, neg.size, True)
        keep_pos = np.sort(rng.permutation(pos)[:k_pos])
        keep = np.sort(np.concatenate([keep_pos, neg]))
    elif target_ratio > current:
        k_neg = closest_count(pos.size * (1 - target_ratio) / target_ratio,
                              neg.size, pos.size, False)
        keep_neg = np.sort(rng.permutation(neg)[:k_neg])
        keep = np.sort(np.concatenate([pos, keep_neg]))
    else:
        return ws.subset(np.arange(len(ws)))
    return ws.subset(keep)
