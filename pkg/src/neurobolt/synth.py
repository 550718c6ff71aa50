"""Synthetic co-registered EEG/BOLD scans with a known neural-to-BOLD map.

The generative model: each frequency band carries a slowly varying
nonnegative envelope (smoothed, rectified AR(1)). EEG channels mix
envelope-modulated narrowband carriers plus sensor noise; latent ROI
drives are linear mixtures of the per-channel band envelopes, convolved
with a canonical hemodynamic kernel, sampled every ``tr``, and normalized.

All randomness flows through numpy's PCG64 generator seeded from
``(seed, stream-tag, ...)`` tuples, so outputs are bit-reproducible
across platforms for a fixed config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps
from scipy import stats

from .signals import EEGRecording, ROITimeSeries, ScanPair, normalize_roi

# Seed-stream tags; kept distinct so each draw is independent.
_STREAM_ENVELOPE = 1
_STREAM_CARRIER = 2
_STREAM_EEG_NOISE = 3
_STREAM_BOLD_NOISE = 4
_STREAM_SUBJECT = 5
_STREAM_CONFIG = 6

# Carrier amplitude per unit gain, in microvolts: with O(1) gains and
# envelopes this puts raw EEG in a realistic +/-100 uV range.
CARRIER_SCALE_UV = 20.0

ENVELOPE_SMOOTH_SEC = 0.5

# Tonic baseline added to every envelope. Keeps log band power well away
# from its singularity so spectral features stay linearly informative.
ENVELOPE_FLOOR = 0.5

DEFAULT_BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("beta", 12.0, 30.0),
    ("gamma", 30.0, 70.0),
)


@dataclass
class HRFKernel:
    """Discrete hemodynamic impulse response with unit mass.

    ``samples`` sum to 1, so convolution has DC gain 1 and preserves the
    mean drive level.
    """

    dt: float
    samples: np.ndarray
    peak_time_sec: float

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if len(self.samples) * self.dt < 25.0:
            raise ValueError(
                f"kernel spans {len(self.samples) * self.dt:.1f}s; need >= 25s "
                "to contain the undershoot"
            )
        total = float(self.samples.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"kernel mass {total} is not 1 within 1e-6")
        peak = float(self.samples.max())
        if int((self.samples == peak).sum()) != 1:
            raise ValueError("kernel must have a single global maximum")


def canonical_hrf(dt: float, duration_sec: float = 32.0) -> HRFKernel:
    """Double-gamma hemodynamic response: gamma(6) - gamma(16)/6, unit scale,
    normalized to unit mass. Peaks near 5 s, undershoot recovering by ~25 s.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if duration_sec < 25.0:
        raise ValueError(
            f"duration {duration_sec}s is too short to contain the undershoot"
        )
    t = np.arange(int(round(duration_sec / dt))) * dt
    h = stats.gamma.pdf(t, 6.0) - stats.gamma.pdf(t, 16.0) / 6.0
    h /= h.sum()
    peak_time = float(t[int(np.argmax(h))])
    return HRFKernel(dt=float(dt), samples=h, peak_time_sec=peak_time)


@dataclass
class SynthConfig:
    """Everything needed to generate one synthetic scan deterministically."""

    channel_labels: list[str]
    roi_labels: list[str]
    duration_sec: float
    fs: float
    tr: float
    bands: list[tuple[str, float, float]]
    envelope_timescale_sec: list[float]
    channel_band_gains: np.ndarray
    roi_mixing: np.ndarray
    eeg_noise_sigma: float = 5.0
    bold_noise_sigma: float = 0.0
    condition: str = "rest"
    seed: int = 0

    def __post_init__(self) -> None:
        self.channel_band_gains = np.asarray(self.channel_band_gains, dtype=np.float64)
        self.roi_mixing = np.asarray(self.roi_mixing, dtype=np.float64)
        if self.fs <= 0 or self.tr <= 0 or self.duration_sec <= 0:
            raise ValueError("fs, tr and duration_sec must all be positive")
        for name, lo, hi in self.bands:
            if not 0 < lo < hi < self.fs / 2:
                raise ValueError(
                    f"band {name!r} ({lo}-{hi} Hz) must lie inside (0, fs/2)"
                )
        if len(self.envelope_timescale_sec) != self.n_bands:
            raise ValueError("need one envelope timescale per band")
        if any(t <= 0 for t in self.envelope_timescale_sec):
            raise ValueError("envelope timescales must be positive")
        if self.channel_band_gains.shape != (self.n_channels, self.n_bands):
            raise ValueError(
                f"channel_band_gains must be {self.n_channels}x{self.n_bands}, "
                f"got {self.channel_band_gains.shape}"
            )
        if self.roi_mixing.shape != (self.n_rois, self.n_channels * self.n_bands):
            raise ValueError(
                f"roi_mixing must be {self.n_rois}x{self.n_channels * self.n_bands}, "
                f"got {self.roi_mixing.shape}"
            )
        if not (
            np.all(np.isfinite(self.channel_band_gains))
            and np.all(np.isfinite(self.roi_mixing))
        ):
            raise ValueError("mixing weights must be finite")
        if self.eeg_noise_sigma < 0 or self.bold_noise_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")

    @property
    def n_channels(self) -> int:
        return len(self.channel_labels)

    @property
    def n_rois(self) -> int:
        return len(self.roi_labels)

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_sec * self.fs))

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration_sec / self.tr + 1e-9))


def default_synth_config(
    n_channels: int = 26,
    n_rois: int = 7,
    duration_sec: float = 630.0,
    fs: float = 200.0,
    tr: float = 2.1,
    bands: tuple[tuple[str, float, float], ...] = DEFAULT_BANDS,
    envelope_timescale_sec: float = 20.0,
    eeg_noise_sigma: float = 5.0,
    bold_noise_sigma: float = 0.0,
    seed: int = 0,
) -> SynthConfig:
    """Build a config with seeded gain/mixing matrices.

    Each ROI's latent drive is dominated by one band (round-robin over
    bands), averaged over channels, which keeps band-power features
    predictive of BOLD by construction.
    """
    rng = np.random.default_rng([seed, _STREAM_CONFIG])
    n_bands = len(bands)
    gains = rng.uniform(0.4, 1.0, size=(n_channels, n_bands))
    mixing = np.zeros((n_rois, n_channels * n_bands))
    for p in range(n_rois):
        b = p % n_bands
        weights = rng.uniform(0.8, 1.2, size=n_channels) / n_channels
        for c in range(n_channels):
            mixing[p, c * n_bands + b] = weights[c]
    return SynthConfig(
        channel_labels=[f"ch{i:02d}" for i in range(n_channels)],
        roi_labels=[f"roi{i:02d}" for i in range(n_rois)],
        duration_sec=duration_sec,
        fs=fs,
        tr=tr,
        bands=list(bands),
        envelope_timescale_sec=[envelope_timescale_sec] * n_bands,
        channel_band_gains=gains,
        roi_mixing=mixing,
        eeg_noise_sigma=eeg_noise_sigma,
        bold_noise_sigma=bold_noise_sigma,
        seed=seed,
    )


def gen_envelopes(cfg: SynthConfig) -> np.ndarray:
    """Per-band nonnegative envelopes at the EEG rate, shape (bands, samples).

    Each is |AR(1)| smoothed with a short Hann window and offset by a tonic
    baseline; the AR pole is set so the pre-rectification autocorrelation
    time equals the configured timescale.
    """
    m = cfg.n_samples
    smooth_len = max(3, int(round(ENVELOPE_SMOOTH_SEC * cfg.fs)))
    win = np.hanning(smooth_len)
    win /= win.sum()
    out = np.empty((cfg.n_bands, m))
    for b in range(cfg.n_bands):
        rng = np.random.default_rng([cfg.seed, _STREAM_ENVELOPE, b])
        rho = math.exp(-1.0 / (cfg.envelope_timescale_sec[b] * cfg.fs))
        eps = rng.standard_normal(m)
        ar = sps.lfilter([math.sqrt(1.0 - rho * rho)], [1.0, -rho], eps)
        out[b] = ENVELOPE_FLOOR + np.convolve(np.abs(ar), win, mode="same")
    return out


def _band_carrier(cfg: SynthConfig, band_index: int) -> np.ndarray:
    """Unit-variance band-limited Gaussian noise, synthesized in the
    frequency domain so all spectral mass lies strictly inside the band."""
    _, lo, hi = cfg.bands[band_index]
    m = cfg.n_samples
    rng = np.random.default_rng([cfg.seed, _STREAM_CARRIER, band_index])
    freqs = np.fft.rfftfreq(m, d=1.0 / cfg.fs)
    spec = np.zeros(len(freqs), dtype=np.complex128)
    in_band = (freqs >= lo) & (freqs <= hi)
    n_bins = int(in_band.sum())
    if n_bins == 0:
        raise ValueError(f"band {cfg.bands[band_index]} contains no FFT bin")
    spec[in_band] = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    carrier = np.fft.irfft(spec, n=m)
    return carrier / carrier.std()


def gen_eeg(envelopes: np.ndarray, cfg: SynthConfig) -> EEGRecording:
    """Mix envelope-modulated carriers into channels and add sensor noise.

    Output is in microvolts (pre-normalization).
    """
    if envelopes.shape != (cfg.n_bands, cfg.n_samples):
        raise ValueError(
            f"envelopes shape {envelopes.shape} does not match config "
            f"({cfg.n_bands}, {cfg.n_samples})"
        )
    sources = np.empty_like(envelopes)
    for b in range(cfg.n_bands):
        sources[b] = envelopes[b] * _band_carrier(cfg, b)
    data = CARRIER_SCALE_UV * (cfg.channel_band_gains @ sources)
    if cfg.eeg_noise_sigma > 0:
        rng = np.random.default_rng([cfg.seed, _STREAM_EEG_NOISE])
        data = data + cfg.eeg_noise_sigma * rng.standard_normal(data.shape)
    return EEGRecording(list(cfg.channel_labels), cfg.fs, data, normalized=False)


def latent_drives(envelopes: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """ROI latent neural drives: mixing applied to per-channel band
    envelopes, shape (rois, samples)."""
    chan_band = (
        cfg.channel_band_gains[:, :, None] * envelopes[None, :, :]
    ).reshape(cfg.n_channels * cfg.n_bands, cfg.n_samples)
    return cfg.roi_mixing @ chan_band


def gen_roi(
    envelopes: np.ndarray, cfg: SynthConfig, hrf: HRFKernel
) -> ROITimeSeries:
    """Convolve latent drives with the hemodynamic kernel, sample at the
    frame rate, add noise, and normalize.

    Normalization skips the low-pass stage so the output is an exact
    affine image of the convolved drive.
    """
    if abs(hrf.dt - 1.0 / cfg.fs) > 1e-12:
        raise ValueError(
            f"hrf.dt {hrf.dt} must equal the EEG sample interval {1.0 / cfg.fs}"
        )
    z = latent_drives(envelopes, cfg)
    bold_full = sps.lfilter(hrf.samples, [1.0], z, axis=1)
    idx = np.round(np.arange(cfg.n_frames) * cfg.tr * cfg.fs).astype(int)
    bold = bold_full[:, idx]
    if cfg.bold_noise_sigma > 0:
        rng = np.random.default_rng([cfg.seed, _STREAM_BOLD_NOISE])
        bold = bold + cfg.bold_noise_sigma * rng.standard_normal(bold.shape)
    raw = ROITimeSeries(list(cfg.roi_labels), cfg.tr, bold)
    return normalize_roi(raw, lowpass_hz=None)


def gen_scan(
    cfg: SynthConfig,
    subject_id: str = "sub-00",
    scan_id: str = "sub-00_scan-00",
) -> ScanPair:
    """Generate one co-registered scan pair from a config."""
    envelopes = gen_envelopes(cfg)
    eeg = gen_eeg(envelopes, cfg)
    hrf = canonical_hrf(dt=1.0 / cfg.fs)
    roi = gen_roi(envelopes, cfg, hrf)
    return ScanPair(subject_id, scan_id, cfg.condition, eeg, roi)


def derive_scan_seed(master_seed: int, subject_index: int, scan_index: int) -> int:
    """Stable per-scan seed from the master seed."""
    ss = np.random.SeedSequence([master_seed, subject_index, scan_index])
    return int(ss.generate_state(1)[0])


def subject_gain_jitter(cfg: SynthConfig, subject_index: int) -> np.ndarray:
    """Per-subject multiplicative gain jitter in [0.8, 1.2]."""
    rng = np.random.default_rng([cfg.seed, _STREAM_SUBJECT, subject_index])
    return rng.uniform(0.8, 1.2, size=cfg.channel_band_gains.shape)


def gen_dataset(
    cfg: SynthConfig, n_subjects: int, scans_per_subject: int
) -> list[ScanPair]:
    """Generate a dataset with subject-level gain jitter and derived seeds."""
    scans: list[ScanPair] = []
    for s in range(n_subjects):
        jitter = subject_gain_jitter(cfg, s)
        subject = f"sub-{s:02d}"
        for r in range(scans_per_subject):
            scan_cfg = replace(
                cfg,
                channel_band_gains=cfg.channel_band_gains * jitter,
                seed=derive_scan_seed(cfg.seed, s, r),
            )
            scans.append(
                gen_scan(scan_cfg, subject_id=subject, scan_id=f"{subject}_scan-{r:02d}")
            )
    return scans
