"""Metrics, scan-level evaluation, reference baselines, and reports.

Predictors are callables mapping a stacked window array ``(B, C, T)`` to a
vector of ``B`` scalar predictions; the trained model, the mean predictor,
and the ridge band-power baseline all satisfy that interface.

A constant prediction (or target) makes Pearson correlation undefined; at
the report level it is recorded as 0 with an explicit flag so baselines
such as the mean predictor can still appear in tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .signals import ScanPair, WindowSample, align_windows

LOG_POWER_EPS = 1e-8
LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)

DEFAULT_BANDS = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("beta", 12.0, 30.0),
    ("gamma", 30.0, 70.0),
)


def pearson(a, b) -> float:
    """Sample Pearson correlation; raises on constant input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("correlation needs at least 2 points")
    if a.min() == a.max() or b.min() == b.max():
        raise ValueError("correlation undefined for constant input")
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float(a @ b) / denom


def pearson_or_flag(a, b) -> tuple[float, bool]:
    """(r, constant_flag): undefined correlations come back as (0.0, True)."""
    try:
        return pearson(a, b), False
    except ValueError:
        return 0.0, True


def windows_targets(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (windows, targets) arrays."""
    xs = np.stack([s.x for s in samples]).astype(np.float64)
    ys = np.array([s.y for s in samples], dtype=np.float64)
    return xs, ys


@dataclass
class ScanEval:
    scan_id: str
    roi_index: int
    roi_label: str
    pearson_r: float
    mse: float
    n_windows: int
    constant_flag: bool

    def to_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "roi_index": self.roi_index,
            "roi_label": self.roi_label,
            "pearson_r": self.pearson_r,
            "mse": self.mse,
            "n_windows": self.n_windows,
            "constant_flag": self.constant_flag,
        }


def evaluate_scan(
    predictor,
    scan: ScanPair,
    roi_index: int,
    window_sec: float = 16.0,
) -> ScanEval:
    """Predict every alignable frame of one (preprocessed) scan and score it."""
    samples = align_windows(scan, window_sec, roi_index)
    if not samples:
        raise ValueError(
            f"scan {scan.scan_id!r} too short for {window_sec}s windows"
        )
    xs, ys = windows_targets(samples)
    preds = np.asarray(predictor(xs), dtype=np.float64)
    r, flagged = pearson_or_flag(preds, ys)
    return ScanEval(
        scan_id=scan.scan_id,
        roi_index=roi_index,
        roi_label=scan.roi.roi_labels[roi_index],
        pearson_r=r,
        mse=float(np.mean((preds - ys) ** 2)),
        n_windows=len(samples),
        constant_flag=flagged,
    )


def model_predictor(model, channel_labels: list[str] | None = None):
    """Adapt a trained model to the evaluation predictor interface."""
    from .model import predict_batch

    def _predict(xs: np.ndarray) -> np.ndarray:
        return predict_batch(model, xs, channel_labels)

    return _predict


@dataclass
class MeanPredictor:
    """Predicts the training-target mean for every window."""

    mean: float

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        return np.full(xs.shape[0], self.mean)


def baseline_mean(train_targets) -> MeanPredictor:
    train_targets = np.asarray(train_targets, dtype=np.float64)
    if train_targets.size == 0:
        raise ValueError("empty training set")
    return MeanPredictor(float(train_targets.mean()))


def band_bins(w: int, fs: float, lo: float, hi: float) -> np.ndarray:
    """FFT bin indices covering [lo, hi] at resolution fs/w (edges rounded
    outward so no band is empty)."""
    df = fs / w
    k_lo = max(0, math.floor(lo / df))
    k_hi = min(w // 2, math.ceil(hi / df))
    if k_hi < k_lo:
        raise ValueError(f"band {lo}-{hi} Hz is empty at resolution {df} Hz")
    return np.arange(k_lo, k_hi + 1)


def band_power_features(
    xs: np.ndarray,
    fs: float,
    bands=DEFAULT_BANDS,
    w: int = 200,
) -> np.ndarray:
    """Per-channel log band powers from one non-overlapping STFT.

    (B, C, T) -> (B, C * n_bands): powers are summed within each band and
    averaged over the window's patches, then log-transformed.
    """
    xs = np.asarray(xs, dtype=np.float64)
    b, c, t = xs.shape
    k = t // w
    segments = xs[:, :, : k * w].reshape(b, c, k, w)
    power = np.abs(np.fft.rfft(segments, axis=-1)) ** 2
    feats = np.empty((b, c, len(bands)))
    for i, (_, lo, hi) in enumerate(bands):
        bins = band_bins(w, fs, lo, hi)
        feats[:, :, i] = power[:, :, :, bins].sum(axis=-1).mean(axis=-1)
    return np.log(feats + LOG_POWER_EPS).reshape(b, c * len(bands))


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float):
    """Standardized ridge with an unpenalized intercept.

    Returns (weights, intercept, feature_mean, feature_std).
    """
    if lam <= 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std
    yc = y - y.mean()
    gram = xs.T @ xs + lam * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xs.T @ yc)
    return w, float(y.mean()), mean, std


@dataclass
class RidgePredictor:
    """Ridge regression on per-channel log band-power features."""

    weights: np.ndarray
    intercept: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    fs: float
    bands: tuple
    w: int
    lam: float

    def features(self, xs: np.ndarray) -> np.ndarray:
        return band_power_features(xs, self.fs, self.bands, self.w)

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        feats = (self.features(xs) - self.feature_mean) / self.feature_std
        return feats @ self.weights + self.intercept


def baseline_ridge(
    train_windows: np.ndarray,
    train_targets: np.ndarray,
    fs: float,
    bands=DEFAULT_BANDS,
    lam: float | None = None,
    val_windows: np.ndarray | None = None,
    val_targets: np.ndarray | None = None,
    lam_grid=LAMBDA_GRID,
    w: int = 200,
) -> RidgePredictor:
    """Fit the band-power ridge baseline.

    With ``lam=None`` the penalty is chosen on the validation split from
    ``lam_grid`` (highest validation R, ties broken by MSE).
    """
    train_targets = np.asarray(train_targets, dtype=np.float64)
    if train_targets.size == 0:
        raise ValueError("empty training set")
    feats = band_power_features(train_windows, fs, bands, w)

    def fit(l):
        weights, intercept, mean, std = ridge_fit(feats, train_targets, l)
        return RidgePredictor(weights, intercept, mean, std, fs, tuple(bands), w, l)

    if lam is not None:
        return fit(lam)
    if val_windows is None or val_targets is None:
        raise ValueError("need a validation split (or an explicit lam)")
    val_targets = np.asarray(val_targets, dtype=np.float64)
    best = None
    best_key = None
    for l in lam_grid:
        predictor = fit(l)
        preds = predictor(val_windows)
        r, flagged = pearson_or_flag(preds, val_targets)
        mse = float(np.mean((preds - val_targets) ** 2))
        key = (-(-math.inf if flagged else r), mse)
        if best_key is None or key < best_key:
            best_key = key
            best = predictor
    return best


def paired_r_ttest(r_a, r_b) -> tuple[float, float]:
    """Paired t-test over per-scan correlation vectors: (statistic, p)."""
    res = stats.ttest_rel(np.asarray(r_a, float), np.asarray(r_b, float))
    return float(res.statistic), float(res.pvalue)


@dataclass
class EvalReport:
    """Per (scan, ROI, model) metrics plus split/model identifiers."""

    rows: list[dict] = field(default_factory=list)
    split: dict = field(default_factory=dict)
    model_id: str = ""

    def add(self, scan_eval: ScanEval, model_id: str | None = None) -> None:
        row = scan_eval.to_dict()
        row["model"] = model_id if model_id is not None else self.model_id
        self.rows.append(row)

    def aggregates(self) -> dict:
        out: dict[str, dict] = {}
        models = sorted({row["model"] for row in self.rows})
        for model in models:
            rs = [row["pearson_r"] for row in self.rows if row["model"] == model]
            mses = [row["mse"] for row in self.rows if row["model"] == model]
            out[model] = {
                "mean_r": float(np.mean(rs)),
                "std_r": float(np.std(rs)),
                "mean_mse": float(np.mean(mses)),
                "std_mse": float(np.std(mses)),
                "n": len(rs),
            }
        return out

    def to_json(self, path: str | Path) -> None:
        payload = {
            "split": self.split,
            "rows": self.rows,
            "aggregates": self.aggregates(),
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    def to_csv(self, path: str | Path) -> None:
        fields = [
            "model", "scan_id", "roi_index", "roi_label",
            "pearson_r", "mse", "n_windows", "constant_flag",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in fields})


def write_prediction_series(
    path: str | Path,
    predictor,
    scan: ScanPair,
    roi_index: int,
    window_sec: float = 16.0,
) -> None:
    """Dump per-frame predicted-vs-true values as CSV for external plotting."""
    samples = align_windows(scan, window_sec, roi_index)
    xs, ys = windows_targets(samples)
    preds = np.asarray(predictor(xs), dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "time_sec", "true", "predicted"])
        for sample, y, p in zip(samples, ys, preds):
            writer.writerow(
                [sample.frame_index, sample.frame_index * scan.roi.tr, y, p]
            )


@dataclass
class AblationVariant:
    name: str
    branches: str
    scale_level: int


TABLE2_VARIANTS = (
    AblationVariant("T", "st_only", 0),
    AblationVariant("MS w/ l3", "spec_only", 3),
    AblationVariant("T+MS w/ l0", "both", 0),
    AblationVariant("T+MS w/ l1", "both", 1),
    AblationVariant("T+MS w/ l2", "both", 2),
    AblationVariant("T+MS w/ l3", "both", 3),
    AblationVariant("T+MS w/ l4", "both", 4),
)


def ablation_run(
    scans: list[ScanPair],
    split,
    variants,
    base_model_cfg,
    train_cfg,
    roi_indices: list[int],
    window_sec: float = 16.0,
    progress: bool = False,
) -> list[dict]:
    """Train and evaluate each (variant, ROI) on a fixed subject-grouped
    split; returns one row per (variant, ROI) with test means plus
    per-scan detail. Deterministic for a fixed seed and split."""
    from .training import train

    by_id = {scan.scan_id: scan for scan in scans}
    rows = []
    for variant in variants:
        cfg = replace(
            base_model_cfg,
            branches=variant.branches,
            scale_level=variant.scale_level,
        )
        for roi in roi_indices:
            train_samples = [
                s for sid in split.train for s in align_windows(by_id[sid], window_sec, roi)
            ]
            val_samples = [
                s for sid in split.val for s in align_windows(by_id[sid], window_sec, roi)
            ]
            if progress:
                print(f"[ablation] {variant.name} roi={roi}", flush=True)
            result = train(train_samples, val_samples, cfg, train_cfg,
                           progress=progress)
            predictor = model_predictor(result.model)
            evals = [
                evaluate_scan(predictor, by_id[sid], roi, window_sec)
                for sid in split.test
            ]
            rows.append(
                {
                    "variant": variant.name,
                    "branches": variant.branches,
                    "scale_level": variant.scale_level,
                    "roi_index": roi,
                    "roi_label": scans[0].roi.roi_labels[roi],
                    "pearson_r": float(np.mean([e.pearson_r for e in evals])),
                    "mse": float(np.mean([e.mse for e in evals])),
                    "per_scan": [e.to_dict() for e in evals],
                }
            )
    return rows


def ablation_table(rows: list[dict]) -> dict:
    """Variant-by-ROI grid of (MSE, R) plus the average R column."""
    variants = []
    for row in rows:
        if row["variant"] not in variants:
            variants.append(row["variant"])
    table = {}
    for variant in variants:
        sub = [r for r in rows if r["variant"] == variant]
        table[variant] = {
            "per_roi": {
                r["roi_label"]: {"mse": r["mse"], "r": r["pearson_r"]} for r in sub
            },
            "avg_r": float(np.mean([r["pearson_r"] for r in sub])),
            "avg_mse": float(np.mean([r["mse"] for r in sub])),
        }
    return table
