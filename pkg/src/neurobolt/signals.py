"""Domain types and preprocessing for co-registered EEG / fMRI scans.

Covers recording containers, resampling and normalization, the
sequence-to-one windowing that pairs a 16 s EEG lookback with each BOLD
frame, leakage-safe splits, and the on-disk scan bundle format.

Conventions fixed here (and relied on elsewhere):

* BOLD frame ``k`` is timestamped at ``k * tr`` (acquisition start).
* A window for frame ``k`` covers the half-open interval
  ``[k*tr - window_sec, k*tr)``.
* Percentiles use linear interpolation between order statistics
  (numpy's default "linear" method).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

EEG_AMPLITUDE_SCALE_UV = 100.0
ROI_LOWPASS_DEFAULT_HZ = 0.15
ROI_NORM_PERCENTILE = 95.0

BUNDLE_META = "meta.json"
BUNDLE_EEG = "eeg.bin"
BUNDLE_ROI = "roi.bin"


class ScanFormatError(ValueError):
    """A scan bundle on disk does not match its manifest."""


@dataclass
class EEGRecording:
    """Multichannel scalp voltage series.

    ``data`` is channels x samples, in microvolts until
    :func:`normalize_amplitude` has been applied.
    """

    channel_labels: list[str]
    fs: float
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"EEG data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] != len(self.channel_labels):
            raise ValueError(
                f"{self.data.shape[0]} data rows but "
                f"{len(self.channel_labels)} channel labels"
            )
        if self.data.shape[1] == 0:
            raise ValueError("EEG recording has no samples")
        if self.fs <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("EEG data contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.n_samples / self.fs


@dataclass
class ROITimeSeries:
    """Per-region BOLD series sampled every ``tr`` seconds."""

    roi_labels: list[str]
    tr: float
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"ROI data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] != len(self.roi_labels):
            raise ValueError(
                f"{self.data.shape[0]} data rows but "
                f"{len(self.roi_labels)} ROI labels"
            )
        if self.data.shape[1] == 0:
            raise ValueError("ROI series has no frames")
        if self.tr <= 0:
            raise ValueError(f"tr must be positive, got {self.tr}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ROI data contains non-finite values")

    @property
    def n_rois(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.n_frames * self.tr


@dataclass
class ScanPair:
    """One simultaneous EEG/BOLD acquisition, sharing t=0 at the first frame."""

    subject_id: str
    scan_id: str
    condition: str
    eeg: EEGRecording
    roi: ROITimeSeries

    def __post_init__(self) -> None:
        # EEG must reach at least the last predicted frame's timestamp.
        min_dur = self.roi.duration_sec - self.roi.tr
        if self.eeg.duration_sec < min_dur - 1e-9:
            raise ValueError(
                f"EEG covers {self.eeg.duration_sec:.2f}s but ROI frames "
                f"extend to {min_dur:.2f}s"
            )


@dataclass
class WindowSample:
    """One (EEG window, scalar BOLD target) training pair."""

    x: np.ndarray
    y: float
    roi_index: int
    frame_index: int
    scan_id: str

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x)
        if self.x.ndim != 2:
            raise ValueError(f"window must be 2-D, got shape {self.x.shape}")
        if not math.isfinite(self.y):
            raise ValueError(f"target is not finite: {self.y}")


@dataclass
class SplitSpec:
    """Train/val/test membership.

    ``kind`` is "intra" (members are frame indices of one scan) or
    "inter" (members are scan_ids).
    """

    kind: str
    train: tuple
    val: tuple
    test: tuple
    gap_sec: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("intra", "inter"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        sets = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = sets[i] & sets[j]
                if overlap:
                    raise ValueError(f"split memberships overlap: {sorted(overlap)[:5]}")


def resample(eeg: EEGRecording, target_fs: float) -> EEGRecording:
    """Resample to ``target_fs`` via the FFT method (ideal anti-aliasing).

    The identity case returns an exact copy. Output length is
    ``round(N * target_fs / fs)``.
    """
    if target_fs <= 0:
        raise ValueError(f"target_fs must be positive, got {target_fs}")
    if target_fs == eeg.fs:
        return replace(eeg, data=eeg.data.copy())
    n_out = int(round(eeg.n_samples * target_fs / eeg.fs))
    if n_out < 1:
        raise ValueError("resampling would produce an empty recording")
    data = sps.resample(np.asarray(eeg.data, dtype=np.float64), n_out, axis=1)
    return EEGRecording(list(eeg.channel_labels), float(target_fs), data, eeg.normalized)


def normalize_amplitude(eeg: EEGRecording) -> EEGRecording:
    """Scale microvolts into roughly [-1, 1] by dividing by 100."""
    if eeg.normalized:
        raise ValueError("recording is already amplitude-normalized")
    return EEGRecording(
        list(eeg.channel_labels),
        eeg.fs,
        np.asarray(eeg.data, dtype=np.float64) / EEG_AMPLITUDE_SCALE_UV,
        normalized=True,
    )


def normalize_roi(
    roi: ROITimeSeries, lowpass_hz: float | None = ROI_LOWPASS_DEFAULT_HZ
) -> ROITimeSeries:
    """Demean, optionally low-pass, then scale each row by the 95th
    percentile of its absolute amplitude.

    Pass ``lowpass_hz=None`` to skip filtering (the operation is then
    idempotent). Percentiles interpolate linearly between order statistics.
    """
    data = np.asarray(roi.data, dtype=np.float64).copy()
    variances = data.var(axis=1)
    for i, v in enumerate(variances):
        if v == 0.0:
            raise ValueError(
                f"ROI {roi.roi_labels[i]!r} has zero variance; cannot normalize"
            )
    data -= data.mean(axis=1, keepdims=True)
    if lowpass_hz is not None:
        frame_fs = 1.0 / roi.tr
        wn = lowpass_hz / (frame_fs / 2.0)
        if not 0 < wn < 1:
            raise ValueError(
                f"low-pass cutoff {lowpass_hz} Hz is not below the frame "
                f"Nyquist {frame_fs / 2:.4f} Hz"
            )
        sos = sps.butter(4, wn, btype="low", output="sos")
        data = sps.sosfiltfilt(sos, data, axis=1)
    scale = np.percentile(np.abs(data), ROI_NORM_PERCENTILE, axis=1)
    if np.any(scale <= 0):
        bad = roi.roi_labels[int(np.argmax(scale <= 0))]
        raise ValueError(f"ROI {bad!r} has zero 95th-percentile amplitude")
    data /= scale[:, None]
    return ROITimeSeries(list(roi.roi_labels), roi.tr, data)


def align_windows(
    pair: ScanPair, window_sec: float, roi_index: int
) -> list[WindowSample]:
    """Emit one sample per frame ``k`` whose lookback window fits.

    The window for frame ``k`` is the half-open interval
    ``[k*tr - window_sec, k*tr)``, i.e. exactly ``round(window_sec * fs)``
    samples ending at the frame's acquisition start. Frames whose window
    would start before the recording or read past its end are skipped.
    """
    eeg, roi = pair.eeg, pair.roi
    if not 0 <= roi_index < roi.n_rois:
        raise ValueError(
            f"roi_index {roi_index} out of range for {roi.n_rois} ROIs"
        )
    n_window = int(round(window_sec * eeg.fs))
    if n_window <= 0:
        raise ValueError(f"window_sec {window_sec} is too short at fs {eeg.fs}")
    if n_window > eeg.n_samples:
        raise ValueError(
            f"window of {window_sec}s ({n_window} samples) exceeds EEG "
            f"length {eeg.n_samples}"
        )
    out: list[WindowSample] = []
    for k in range(roi.n_frames):
        end = int(round(k * roi.tr * eeg.fs))
        start = end - n_window
        if start < 0:
            continue
        if end > eeg.n_samples:
            break
        out.append(
            WindowSample(
                x=eeg.data[:, start:end].copy(),
                y=float(roi.data[roi_index, k]),
                roi_index=roi_index,
                frame_index=k,
                scan_id=pair.scan_id,
            )
        )
    if not out:
        warnings.warn(
            f"scan {pair.scan_id!r}: no frame has a full {window_sec}s lookback",
            stacklevel=2,
        )
    return out


def split_intra(
    samples: list[WindowSample],
    ratios: tuple[int, int, int] = (8, 1, 1),
    gap_sec: float = 20.0,
    tr: float | None = None,
) -> SplitSpec:
    """Chronological 8:1:1 split of one scan's samples with guard gaps.

    ``ceil(gap_sec / tr)`` frames are dropped from the beginning of val and
    of test, so train keeps the first 80% untouched.
    """
    if tr is None or tr <= 0:
        raise ValueError("tr must be given and positive")
    frames = [s.frame_index for s in samples]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError("samples must be ordered by frame_index")
    scan_ids = {s.scan_id for s in samples}
    if len(scan_ids) > 1:
        raise ValueError(f"samples span multiple scans: {sorted(scan_ids)}")
    n = len(samples)
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    gap = math.ceil(gap_sec / tr)
    train = frames[:n_train]
    val = frames[n_train + gap : n_train + n_val]
    test = frames[n_train + n_val + gap :]
    if not train or not val or not test:
        raise ValueError(
            f"{n} samples leave an empty split after {gap}-frame gaps "
            f"(train={len(train)}, val={len(val)}, test={len(test)})"
        )
    return SplitSpec("intra", tuple(train), tuple(val), tuple(test), gap_sec)


def split_inter(
    scans: list[ScanPair],
    ratios: tuple[int, int, int] = (3, 1, 1),
    seed: int = 0,
) -> SplitSpec:
    """Subject-grouped random split, targeting scan-count ratios.

    Subjects are shuffled by ``seed`` and assigned greedily so that every
    scan of a subject lands in one set and each set is nonempty.
    """
    subject_scans: dict[str, list[str]] = {}
    for scan in scans:
        subject_scans.setdefault(scan.subject_id, []).append(scan.scan_id)
    subjects = sorted(subject_scans)
    if len(subjects) < 3:
        raise ValueError(
            f"need at least 3 distinct subjects for a 3-way split, got {len(subjects)}"
        )
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_scans = len(scans)
    total = sum(ratios)
    targets = [n_scans * r / total for r in ratios]
    sets: list[list[str]] = [[], [], []]
    counts = [0, 0, 0]
    remaining = list(order)
    for i in range(3):
        # Later sets each still need at least one subject.
        while remaining and counts[i] < targets[i] and len(remaining) > (2 - i):
            subj = remaining.pop(0)
            sets[i].extend(subject_scans[subj])
            counts[i] += len(subject_scans[subj])
    for subj in remaining:
        sets[2].extend(subject_scans[subj])
    if not all(sets):
        raise ValueError("split left an empty set; need more subjects")
    return SplitSpec("inter", tuple(sets[0]), tuple(sets[1]), tuple(sets[2]))


def save_scan_bundle(pair: ScanPair, bundle_dir: str | Path) -> Path:
    """Write ``meta.json`` + ``eeg.bin`` + ``roi.bin`` (little-endian f32)."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": pair.subject_id,
        "scan_id": pair.scan_id,
        "condition": pair.condition,
        "fs": pair.eeg.fs,
        "tr": pair.roi.tr,
        "channel_labels": list(pair.eeg.channel_labels),
        "roi_labels": list(pair.roi.roi_labels),
        "dtype": "float32",
        "endianness": "little",
        "n_samples": pair.eeg.n_samples,
        "n_frames": pair.roi.n_frames,
        "eeg_normalized": pair.eeg.normalized,
    }
    (bundle_dir / BUNDLE_META).write_text(json.dumps(meta, indent=2))
    (bundle_dir / BUNDLE_EEG).write_bytes(
        np.ascontiguousarray(pair.eeg.data, dtype="<f4").tobytes()
    )
    (bundle_dir / BUNDLE_ROI).write_bytes(
        np.ascontiguousarray(pair.roi.data, dtype="<f4").tobytes()
    )
    return bundle_dir


def load_scan_bundle(bundle_dir: str | Path) -> ScanPair:
    """Read a scan bundle, rejecting any shape/manifest mismatch."""
    bundle_dir = Path(bundle_dir)
    meta_path = bundle_dir / BUNDLE_META
    if not meta_path.is_file():
        raise ScanFormatError(f"missing {BUNDLE_META} in {bundle_dir}")
    meta = json.loads(meta_path.read_text())
    required = (
        "subject_id", "scan_id", "condition", "fs", "tr", "channel_labels",
        "roi_labels", "dtype", "endianness", "n_samples", "n_frames",
    )
    missing = [k for k in required if k not in meta]
    if missing:
        raise ScanFormatError(f"{meta_path}: missing manifest keys {missing}")
    if meta["dtype"] != "float32" or meta["endianness"] != "little":
        raise ScanFormatError(
            f"{meta_path}: unsupported encoding "
            f"{meta['dtype']}/{meta['endianness']}"
        )
    n_ch = len(meta["channel_labels"])
    n_roi = len(meta["roi_labels"])
    eeg_bytes = (bundle_dir / BUNDLE_EEG).read_bytes()
    roi_bytes = (bundle_dir / BUNDLE_ROI).read_bytes()
    if len(eeg_bytes) != n_ch * meta["n_samples"] * 4:
        raise ScanFormatError(
            f"{bundle_dir}: eeg.bin holds {len(eeg_bytes)} bytes, manifest "
            f"promises {n_ch}x{meta['n_samples']} float32"
        )
    if len(roi_bytes) != n_roi * meta["n_frames"] * 4:
        raise ScanFormatError(
            f"{bundle_dir}: roi.bin holds {len(roi_bytes)} bytes, manifest "
            f"promises {n_roi}x{meta['n_frames']} float32"
        )
    eeg_data = np.frombuffer(eeg_bytes, dtype="<f4").reshape(n_ch, meta["n_samples"])
    roi_data = np.frombuffer(roi_bytes, dtype="<f4").reshape(n_roi, meta["n_frames"])
    eeg = EEGRecording(
        list(meta["channel_labels"]),
        float(meta["fs"]),
        eeg_data.copy(),
        normalized=bool(meta.get("eeg_normalized", False)),
    )
    roi = ROITimeSeries(list(meta["roi_labels"]), float(meta["tr"]), roi_data.copy())
    return ScanPair(meta["subject_id"], meta["scan_id"], meta["condition"], eeg, roi)
