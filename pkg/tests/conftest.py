import numpy as np
import pytest
import torch

from neurobolt.signals import EEGRecording, ROITimeSeries, ScanPair


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


def make_scan(
    n_channels=3,
    n_rois=2,
    fs=200.0,
    tr=2.0,
    duration_sec=60.0,
    seed=0,
    scan_id="scan-00",
    subject_id="sub-00",
) -> ScanPair:
    """Random (not physiological) scan pair for plumbing tests."""
    rng = np.random.default_rng(seed)
    n = int(duration_sec * fs)
    k = int(duration_sec / tr)
    eeg = EEGRecording(
        [f"ch{i:02d}" for i in range(n_channels)],
        fs,
        rng.standard_normal((n_channels, n)),
        normalized=True,
    )
    roi = ROITimeSeries(
        [f"roi{i:02d}" for i in range(n_rois)], tr, rng.standard_normal((n_rois, k))
    )
    return ScanPair(subject_id, scan_id, "rest", eeg, roi)
