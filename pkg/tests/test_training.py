import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from neurobolt.model import build_model, predict_batch, tiny_geometry
from neurobolt.signals import WindowSample
from neurobolt.training import (
    TrainConfig,
    TrainingDivergedError,
    finite_difference_check,
    grad_check,
    is_decay_exempt,
    layer_index_of,
    load_checkpoint,
    lr_at,
    mse_loss,
    param_groups,
    save_checkpoint,
    train,
)


def make_samples(n, cfg, seed=0, scan_id="scan"):
    rng = np.random.default_rng(seed)
    return [
        WindowSample(
            x=rng.standard_normal((cfg.n_channels_max, cfg.window_samples)),
            y=float(rng.standard_normal()),
            roi_index=0,
            frame_index=i,
            scan_id=scan_id,
        )
        for i in range(n)
    ]


class TestMseLoss:
    def test_identity_zero(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_arithmetic(self):
        assert mse_loss([0.0, 0.0], [1.0, -1.0]) == 1.0
        assert mse_loss([2.0], [0.0]) == 4.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mse_loss([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            mse_loss([1.0], [1.0, 2.0])


class TestLrSchedule:
    def setup_method(self):
        self.cfg = TrainConfig()

    def test_warmup_starts_at_zero(self):
        assert lr_at(0, self.cfg) == 0.0

    def test_peak_at_end_of_warmup(self):
        steps_per_epoch = 10
        step = self.cfg.warmup_epochs * steps_per_epoch
        n_layers = 5
        assert lr_at(step, self.cfg, n_layers, n_layers, steps_per_epoch) == pytest.approx(3e-4)

    def test_final_step_reaches_min_lr(self):
        steps_per_epoch = 7
        final = self.cfg.epochs * steps_per_epoch - 1
        n_layers = 5
        lr = lr_at(final, self.cfg, n_layers, n_layers, steps_per_epoch)
        assert lr == pytest.approx(1e-6, abs=1e-12)

    def test_layer_decay_scaling(self):
        step = self.cfg.warmup_epochs  # peak, steps_per_epoch=1
        top = lr_at(step, self.cfg, 5, 5)
        deepest = lr_at(step, self.cfg, 0, 5)
        assert deepest == pytest.approx(top * self.cfg.layer_decay**5)

    def test_monotone_decay_after_warmup(self):
        lrs = [lr_at(s, self.cfg) for s in range(self.cfg.warmup_epochs, self.cfg.epochs)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestParamGrouping:
    def setup_method(self):
        self.model = build_model(tiny_geometry())
        self.cfg = TrainConfig()

    def test_embedding_tables_and_norms_exempt(self):
        for name, param in self.model.named_parameters():
            if name in ("st.te", "st.se", "sp.se_sp"):
                assert is_decay_exempt(name, param)
            if name.endswith(".bias") or "norm" in name:
                assert is_decay_exempt(name, param)
            if name.startswith("sp.fe.") and name.endswith(".weight"):
                assert is_decay_exempt(name, param)
        assert not is_decay_exempt(
            "st.blocks.0.attn.qkv.weight",
            dict(self.model.named_parameters())["st.blocks.0.attn.qkv.weight"],
        )

    def test_groups_cover_every_parameter_once(self):
        groups = param_groups(self.model, self.cfg)
        names = [n for g in groups for n in g["names"]]
        assert sorted(names) == sorted(n for n, _ in self.model.named_parameters())

    def test_decay_setting_per_group(self):
        for group in param_groups(self.model, self.cfg):
            expected = {
                is_decay_exempt(n, p)
                for n, p in zip(group["names"], group["params"])
            }
            assert len(expected) == 1
            exempt = expected.pop()
            assert group["weight_decay"] == (0.0 if exempt else self.cfg.weight_decay)

    def test_head_sits_at_top_scale(self):
        cfg_model = self.model.cfg
        idx, n_layers = layer_index_of("head.weight", cfg_model)
        assert idx == n_layers
        idx0, _ = layer_index_of("st.patch_embed.proj.weight", cfg_model)
        assert idx0 == 0
        idx1, _ = layer_index_of("st.blocks.0.attn.qkv.weight", cfg_model)
        assert idx1 == 1


class TestTrain:
    def _quick_cfg(self, **overrides):
        base = dict(batch_size=8, epochs=3, warmup_epochs=1, seed=0)
        base.update(overrides)
        return TrainConfig(**base)

    def test_deterministic_loss_curves(self):
        mcfg = tiny_geometry()
        train_s = make_samples(12, mcfg, seed=1)
        val_s = make_samples(6, mcfg, seed=2)
        a = train(train_s, val_s, mcfg, self._quick_cfg())
        b = train(train_s, val_s, mcfg, self._quick_cfg())
        assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
        assert [r.val_r for r in a.history] == [r.val_r for r in b.history]

    def test_empty_val_rejected(self):
        mcfg = tiny_geometry()
        with pytest.raises(ValueError, match="validation"):
            train(make_samples(4, mcfg), [], mcfg, self._quick_cfg())

    def test_empty_train_rejected(self):
        mcfg = tiny_geometry()
        with pytest.raises(ValueError, match="training"):
            train([], make_samples(4, mcfg), mcfg, self._quick_cfg())

    def test_divergence_aborts_with_diagnostic(self):
        mcfg = tiny_geometry()
        cfg = self._quick_cfg(peak_lr=1e18, warmup_epochs=1, epochs=40, min_lr=1e10)
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train(make_samples(12, mcfg, seed=1), make_samples(4, mcfg, seed=2), mcfg, cfg)

    def test_run_dir_artifacts(self, tmp_path):
        mcfg = tiny_geometry()
        result = train(
            make_samples(8, mcfg, seed=1),
            make_samples(4, mcfg, seed=2),
            mcfg,
            self._quick_cfg(),
            run_dir=tmp_path,
        )
        assert (tmp_path / "checkpoint" / "manifest.json").is_file()
        assert (tmp_path / "checkpoint" / "params.bin").is_file()
        log_lines = (tmp_path / "log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == 3
        assert result.best_epoch >= 0

    def test_memorizes_small_set(self):
        # scaled-down capability check; the acceptance suite runs the
        # full 64-window / 200-step criterion.
        mcfg = tiny_geometry(embed_dim=16, drop_path=0.0)
        samples = make_samples(16, mcfg, seed=3)
        cfg = TrainConfig(
            batch_size=16, epochs=60, warmup_epochs=5, peak_lr=3e-3, seed=0
        )
        result = train(samples, samples, mcfg, cfg)
        assert result.history[-1].train_loss < 0.1 * result.history[0].train_loss


class TestGradCheck:
    def test_full_tiny_model_matches_finite_differences(self):
        report = grad_check(tiny_geometry(), tolerance=1e-4)
        assert report.passed, f"max rel err {report.max_rel_err:.2e}"

    def test_linear_model_is_exact(self):
        torch.manual_seed(0)

        class LinearReg(nn.Module):
            def __init__(self):
                super().__init__()
                self.lin = nn.Linear(5, 1).double()

            def forward(self, x):
                return self.lin(x).squeeze(-1)

        model = LinearReg()
        rng = np.random.default_rng(0)
        x = torch.as_tensor(rng.standard_normal((8, 5)))
        y = torch.as_tensor(rng.standard_normal(8))
        report = finite_difference_check(
            model, lambda m: F.mse_loss(m(x), y), tolerance=1e-8
        )
        assert report.max_rel_err < 1e-8

    def test_zero_input_batch_gradients_finite(self):
        torch.manual_seed(0)
        model = build_model(tiny_geometry(), dtype=torch.float64)
        ids = model.resolve_channels(None)
        x = torch.zeros(2, 2, 400, dtype=torch.float64)
        y = torch.ones(2, dtype=torch.float64)
        loss = F.mse_loss(model(x, ids), y)
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is None or torch.isfinite(p.grad).all(), name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        mcfg = tiny_geometry(seed=5)
        model = build_model(mcfg)
        save_checkpoint(tmp_path / "ck", model, mcfg, TrainConfig())
        loaded, manifest = load_checkpoint(tmp_path / "ck")
        for (na, pa), (nb, pb) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert na == nb
            assert torch.equal(pa, pb)
        assert manifest["model_config"]["embed_dim"] == mcfg.embed_dim

    def test_predictions_identical_after_reload(self, tmp_path):
        mcfg = tiny_geometry(seed=6)
        model = build_model(mcfg)
        xs = np.random.default_rng(0).standard_normal((4, 2, 400))
        before = predict_batch(model, xs)
        save_checkpoint(tmp_path / "ck", model, mcfg)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        after = predict_batch(loaded, xs)
        assert np.array_equal(before, after)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        mcfg = tiny_geometry(seed=7)
        model = build_model(mcfg)
        save_checkpoint(tmp_path / "a", model, mcfg)
        loaded, _ = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", loaded, mcfg)
        assert (tmp_path / "a" / "params.bin").read_bytes() == (
            tmp_path / "b" / "params.bin"
        ).read_bytes()

    def test_corrupt_offsets_rejected(self, tmp_path):
        import json

        mcfg = tiny_geometry()
        model = build_model(mcfg)
        ck = save_checkpoint(tmp_path / "ck", model, mcfg)
        manifest = json.loads((ck / "manifest.json").read_text())
        manifest["tensors"][1]["offset"] += 4
        (ck / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="contiguous"):
            load_checkpoint(ck)
