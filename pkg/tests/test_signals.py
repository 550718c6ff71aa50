import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurobolt.signals import (
    EEGRecording,
    ROITimeSeries,
    ScanFormatError,
    ScanPair,
    SplitSpec,
    align_windows,
    load_scan_bundle,
    normalize_amplitude,
    normalize_roi,
    resample,
    save_scan_bundle,
    split_inter,
    split_intra,
)

from conftest import make_scan


def make_eeg(data, fs=200.0, normalized=False):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    labels = [f"ch{i:02d}" for i in range(data.shape[0])]
    return EEGRecording(labels, fs, data, normalized)


class TestTypes:
    def test_channel_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel labels"):
            EEGRecording(["a", "b"], 200.0, np.zeros((3, 10)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            make_eeg([[0.0, np.nan]])

    def test_roi_label_mismatch_rejected(self):
        with pytest.raises(ValueError, match="ROI labels"):
            ROITimeSeries(["a"], 2.0, np.zeros((2, 5)))

    def test_scan_pair_requires_eeg_coverage(self):
        rng = np.random.default_rng(0)
        eeg = make_eeg(rng.standard_normal((2, 1000)))  # 5 s at 200 Hz
        roi = ROITimeSeries(["r0"], 2.0, rng.standard_normal((1, 10)))  # 20 s
        with pytest.raises(ValueError, match="covers"):
            ScanPair("s", "sc", "rest", eeg, roi)

    def test_split_spec_rejects_overlap(self):
        with pytest.raises(ValueError, match="overlap"):
            SplitSpec("intra", (1, 2), (2, 3), (4,))


class TestResample:
    def test_identity_is_bit_exact_copy(self):
        eeg = make_eeg(np.random.default_rng(0).standard_normal((2, 500)))
        out = resample(eeg, 200.0)
        assert out.fs == eeg.fs
        assert np.array_equal(out.data, eeg.data)
        assert out.data is not eeg.data

    def test_downsampled_sine_matches_analytic(self):
        # 10 Hz sine, 4 s at 400 Hz -> 200 Hz
        t_in = np.arange(1600) / 400.0
        eeg = make_eeg(np.sin(2 * np.pi * 10.0 * t_in), fs=400.0)
        out = resample(eeg, 200.0)
        assert out.n_samples == 800
        t_out = np.arange(800) / 200.0
        expected = np.sin(2 * np.pi * 10.0 * t_out)
        interior = slice(50, 750)
        assert np.abs(out.data[0, interior] - expected[interior]).max() < 1e-3

    def test_output_length_arithmetic(self):
        eeg = make_eeg(np.random.default_rng(1).standard_normal((1, 1000)), fs=250.0)
        assert resample(eeg, 200.0).n_samples == 800

    def test_rejects_nonpositive_rate(self):
        eeg = make_eeg(np.zeros((1, 10)) + 1.0)
        with pytest.raises(ValueError):
            resample(eeg, 0.0)

    def test_antialiasing_removes_content_above_new_nyquist(self):
        # 90 Hz tone sampled at 400 Hz must vanish after resampling to 100 Hz.
        t = np.arange(4000) / 400.0
        eeg = make_eeg(np.sin(2 * np.pi * 90.0 * t), fs=400.0)
        out = resample(eeg, 100.0)
        assert np.abs(out.data).max() < 0.05


class TestNormalizeAmplitude:
    def test_divides_by_100(self):
        eeg = make_eeg([[100.0, 0.0, -55.0]])
        out = normalize_amplitude(eeg)
        assert out.normalized
        np.testing.assert_allclose(out.data[0], [1.0, 0.0, -0.55])

    def test_double_normalization_rejected(self):
        eeg = make_eeg([[1.0, 2.0]], normalized=True)
        with pytest.raises(ValueError, match="already"):
            normalize_amplitude(eeg)


class TestNormalizeRoi:
    def test_constant_row_errors_with_roi_name(self):
        roi = ROITimeSeries(["flatroi", "ok"], 2.0,
                            np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 2.0, 3.0, 4.0]]))
        with pytest.raises(ValueError, match="flatroi"):
            normalize_roi(roi, lowpass_hz=None)

    def test_three_point_row_scaling(self):
        roi = ROITimeSeries(["r"], 2.0, np.array([[-2.0, 0.0, 2.0]]))
        out = normalize_roi(roi, lowpass_hz=None)
        # 95th percentile of |[-2, 0, 2]| by linear interpolation is 2.0
        expected_scale = np.percentile(np.abs([-2.0, 0.0, 2.0]), 95)
        assert expected_scale == pytest.approx(2.0)
        np.testing.assert_allclose(out.data[0], [-1.0, 0.0, 1.0])

    def test_idempotent_without_lowpass(self):
        rng = np.random.default_rng(3)
        roi = ROITimeSeries(["a", "b"], 2.1, rng.standard_normal((2, 300)))
        once = normalize_roi(roi, lowpass_hz=None)
        twice = normalize_roi(once, lowpass_hz=None)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-9)

    def test_output_rows_demeaned_and_unit_percentile(self):
        rng = np.random.default_rng(4)
        roi = ROITimeSeries([f"r{i}" for i in range(5)], 2.1,
                            rng.standard_normal((5, 400)) * 7 + 3)
        out = normalize_roi(roi, lowpass_hz=None)
        assert np.abs(out.data.mean(axis=1)).max() < 1e-9
        pct = np.percentile(np.abs(out.data), 95, axis=1)
        np.testing.assert_allclose(pct, 1.0, atol=1e-9)

    def test_lowpass_attenuates_fast_fluctuations(self):
        tr = 2.0  # frame rate 0.5 Hz, Nyquist 0.25 Hz
        k = 500
        t = np.arange(k) * tr
        slow = np.sin(2 * np.pi * 0.02 * t)
        fast = np.sin(2 * np.pi * 0.24 * t)
        roi = ROITimeSeries(["r"], tr, (slow + fast)[None, :])
        out = normalize_roi(roi, lowpass_hz=0.15)
        spec = np.abs(np.fft.rfft(out.data[0]))
        freqs = np.fft.rfftfreq(k, d=tr)
        fast_bin = np.argmin(np.abs(freqs - 0.24))
        slow_bin = np.argmin(np.abs(freqs - 0.02))
        assert spec[fast_bin] < 0.05 * spec[slow_bin]


class TestAlignWindows:
    def test_enumeration_example(self):
        scan = make_scan(tr=2.1, duration_sec=210.0, fs=200.0)  # K=100
        samples = align_windows(scan, 16.0, 0)
        assert len(samples) == 92
        assert samples[0].frame_index == 8  # 8 * 2.1 = 16.8 >= 16

    def test_window_shape_at_paper_geometry(self):
        scan = make_scan(n_channels=26, tr=2.1, duration_sec=63.0, fs=200.0)
        samples = align_windows(scan, 16.0, 0)
        assert all(s.x.shape == (26, 3200) for s in samples)

    def test_short_scan_empty_with_warning(self):
        scan = make_scan(tr=2.0, duration_sec=30.0, fs=200.0)
        # EEG long enough, but make ROI shorter than one window
        roi = ROITimeSeries(scan.roi.roi_labels, 2.0, scan.roi.data[:, :7])  # 14 s
        short = ScanPair("s", "sc", "rest", scan.eeg, roi)
        with pytest.warns(UserWarning, match="lookback"):
            assert align_windows(short, 16.0, 0) == []

    def test_window_longer_than_eeg_rejected(self):
        scan = make_scan(duration_sec=10.0)
        with pytest.raises(ValueError, match="exceeds"):
            align_windows(scan, 16.0, 0)

    def test_roi_index_out_of_range(self):
        scan = make_scan(n_rois=2)
        with pytest.raises(ValueError, match="roi_index"):
            align_windows(scan, 16.0, 5)

    def test_window_content_matches_slice(self):
        scan = make_scan(tr=2.0, duration_sec=40.0, fs=100.0)
        samples = align_windows(scan, 16.0, 1)
        s = samples[3]
        end = int(round(s.frame_index * 2.0 * 100.0))
        np.testing.assert_array_equal(s.x, scan.eeg.data[:, end - 1600 : end])
        assert s.y == scan.roi.data[1, s.frame_index]

    @given(
        tr=st.floats(1.0, 4.0),
        window_sec=st.floats(4.0, 20.0),
        k=st.integers(20, 120),
    )
    @settings(max_examples=50, deadline=None)
    def test_count_matches_brute_force(self, tr, window_sec, k):
        fs = 100.0
        n = int(math.ceil(k * tr * fs)) + 1
        eeg = EEGRecording(["c0"], fs, np.zeros((1, n)) + 1.0, normalized=True)
        roi = ROITimeSeries(["r0"], tr, np.arange(k, dtype=float)[None, :] % 5 + 1)
        scan = ScanPair("s", "sc", "rest", eeg, roi)
        t = int(round(window_sec * fs))
        expected = sum(
            1
            for frame in range(k)
            if 0 <= int(round(frame * tr * fs)) - t and int(round(frame * tr * fs)) <= n
        )
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            samples = align_windows(scan, window_sec, 0)
        assert len(samples) == expected
        # when the EEG covers the scan, the closed form holds away from
        # floating-point knife edges
        ratio = window_sec / tr
        if abs(ratio - round(ratio)) > 1e-6:
            assert expected == k - math.ceil(ratio)


class TestSplitIntra:
    @staticmethod
    def _samples(n, tr=2.1):
        scan = make_scan(tr=tr, duration_sec=(n + 10) * tr, fs=50.0)
        samples = align_windows(scan, 16.0, 0)
        return samples[:n]

    def test_1000_frame_example(self):
        samples = self._samples(1000)
        split = split_intra(samples, (8, 1, 1), 20.0, 2.1)
        # ceil(20 / 2.1) = 10 frames dropped at the head of val and of test
        assert len(split.train) == 800
        assert len(split.val) == 90
        assert len(split.test) == 90
        frames = [s.frame_index for s in samples]
        assert list(split.train) == frames[:800]
        assert list(split.val) == frames[810:900]
        assert list(split.test) == frames[910:1000]

    def test_too_few_samples_error(self):
        samples = self._samples(30)
        with pytest.raises(ValueError, match="empty split"):
            split_intra(samples, (8, 1, 1), 20.0, 2.1)

    def test_disjoint_and_gap_separated(self):
        samples = self._samples(400)
        split = split_intra(samples, (8, 1, 1), 20.0, 2.1)
        train, val, test = set(split.train), set(split.val), set(split.test)
        assert not (train & val or train & test or val & test)
        min_gap_frames = 20.0 / 2.1
        assert min(split.val) - max(split.train) > min_gap_frames
        assert min(split.test) - max(split.val) > min_gap_frames

    @given(n=st.integers(150, 2000), tr=st.floats(1.0, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_gap_wall_time_property(self, n, tr):
        samples = self._samples(n, tr=tr)
        try:
            split = split_intra(samples, (8, 1, 1), 20.0, tr)
        except ValueError:
            return
        assert (min(split.val) - max(split.train)) * tr >= 20.0
        assert (min(split.test) - max(split.val)) * tr >= 20.0
        assert set(split.train).isdisjoint(split.val)
        assert set(split.val).isdisjoint(split.test)


class TestSplitInter:
    @staticmethod
    def _paper_roster():
        # 22 subjects, 7 with two scans: 29 scans, as in the resting dataset
        scans = []
        for i in range(22):
            n_scans = 2 if i < 7 else 1
            for r in range(n_scans):
                scans.append(
                    make_scan(
                        duration_sec=20.0,
                        tr=2.0,
                        seed=i * 10 + r,
                        subject_id=f"sub-{i:02d}",
                        scan_id=f"sub-{i:02d}_scan-{r}",
                    )
                )
        return scans

    def test_paper_shaped_split(self):
        scans = self._paper_roster()
        split = split_inter(scans, (3, 1, 1), seed=0)
        sizes = (len(split.train), len(split.val), len(split.test))
        assert sum(sizes) == 29
        assert all(s > 0 for s in sizes)
        # close to the 18:5:6 shape (3:1:1 over 29 scans)
        assert abs(sizes[0] - 29 * 3 / 5) <= 2
        assert abs(sizes[1] - 29 / 5) <= 2

    def test_subject_scans_stay_together(self):
        scans = self._paper_roster()
        subject_of = {s.scan_id: s.subject_id for s in scans}
        for seed in range(50):
            split = split_inter(scans, (3, 1, 1), seed=seed)
            for members in (split.train, split.val, split.test):
                subjects = {subject_of[sid] for sid in members}
                for other in (split.train, split.val, split.test):
                    if other is members:
                        continue
                    assert subjects.isdisjoint({subject_of[sid] for sid in other})

    def test_deterministic_for_seed(self):
        scans = self._paper_roster()
        a = split_inter(scans, (3, 1, 1), seed=42)
        b = split_inter(scans, (3, 1, 1), seed=42)
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_too_few_subjects(self):
        scans = self._paper_roster()[:2]
        with pytest.raises(ValueError, match="subjects"):
            split_inter(scans, (3, 1, 1), seed=0)


class TestScanBundle:
    def test_round_trip(self, tmp_path):
        scan = make_scan(seed=9)
        save_scan_bundle(scan, tmp_path / "b")
        loaded = load_scan_bundle(tmp_path / "b")
        assert loaded.subject_id == scan.subject_id
        assert loaded.scan_id == scan.scan_id
        assert loaded.eeg.channel_labels == scan.eeg.channel_labels
        assert loaded.eeg.normalized == scan.eeg.normalized
        np.testing.assert_allclose(
            loaded.eeg.data, scan.eeg.data.astype(np.float32), rtol=0, atol=0
        )
        np.testing.assert_allclose(
            loaded.roi.data, scan.roi.data.astype(np.float32), rtol=0, atol=0
        )

    def test_truncated_payload_rejected(self, tmp_path):
        scan = make_scan()
        bundle = save_scan_bundle(scan, tmp_path / "b")
        payload = (bundle / "eeg.bin").read_bytes()
        (bundle / "eeg.bin").write_bytes(payload[:-4])
        with pytest.raises(ScanFormatError, match="eeg.bin"):
            load_scan_bundle(bundle)

    def test_missing_manifest_key_rejected(self, tmp_path):
        import json

        scan = make_scan()
        bundle = save_scan_bundle(scan, tmp_path / "b")
        meta = json.loads((bundle / "meta.json").read_text())
        del meta["tr"]
        (bundle / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(ScanFormatError, match="tr"):
            load_scan_bundle(bundle)
