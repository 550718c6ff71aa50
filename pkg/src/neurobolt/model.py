"""Full predictor: fused spatiotemporal + spectral representations and a
GELU-then-linear regression head producing one scalar per EEG window.

One model is trained per target ROI. A disabled branch contributes a zero
representation, which is how the branch ablations are realized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .spatiotemporal import STEncoder, trunc_normal_init
from .spectral import SpecEncoder

BRANCHES = ("both", "st_only", "spec_only")


@dataclass
class NeuroBoltConfig:
    """Architecture and input-geometry settings.

    The default transformer geometry is sized for a single desktop core;
    :func:`paper_geometry` returns the published-scale preset.
    """

    channel_labels: list[str]
    window_samples: int = 3200
    patch_w: int = 200
    spec_base_w: int = 100
    scale_level: int = 3
    embed_dim: int = 96
    st_depth: int = 4
    st_heads: int = 8
    sp_depth: int = 4
    sp_heads: int = 8
    ffn_ratio: int = 4
    rank: int = 64
    use_cls_token: bool = False
    branches: str = "both"
    drop_path: float = 0.1
    sp_dropout: float = 0.1
    target_roi: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.channel_labels) != len(set(self.channel_labels)):
            raise ValueError("channel labels must be unique")
        if not self.channel_labels:
            raise ValueError("need at least one channel label")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if not 0 <= self.scale_level <= 4:
            raise ValueError(f"scale_level must be in 0..4, got {self.scale_level}")
        if self.window_samples % self.patch_w != 0:
            raise ValueError(
                f"window of {self.window_samples} samples must divide into "
                f"{self.patch_w}-sample patches"
            )
        w_max = self.spec_base_w * 2**self.scale_level
        if self.window_samples % w_max != 0:
            raise ValueError(
                f"window of {self.window_samples} samples must divide by the "
                f"largest spectral scale {w_max}"
            )

    @property
    def n_channels_max(self) -> int:
        return len(self.channel_labels)

    @property
    def patches_per_channel(self) -> int:
        return self.window_samples // self.patch_w

    @property
    def spec_windows(self) -> int:
        return self.window_samples // self.spec_base_w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NeuroBoltConfig":
        return cls(**d)


def paper_geometry(channel_labels: list[str], **overrides) -> NeuroBoltConfig:
    """Published-scale preset: 200-dim embeddings, 12-layer dense branch."""
    base = dict(
        channel_labels=list(channel_labels),
        embed_dim=200,
        st_depth=12,
        st_heads=10,
        sp_depth=4,
        sp_heads=8,
    )
    base.update(overrides)
    return NeuroBoltConfig(**base)


def tiny_geometry(**overrides) -> NeuroBoltConfig:
    """Two-channel configuration small enough for finite-difference checks."""
    base = dict(
        channel_labels=["ch00", "ch01"],
        window_samples=400,
        patch_w=200,
        spec_base_w=100,
        scale_level=1,
        embed_dim=8,
        st_depth=1,
        st_heads=2,
        sp_depth=1,
        sp_heads=2,
        rank=4,
        drop_path=0.0,
        sp_dropout=0.0,
    )
    base.update(overrides)
    return NeuroBoltConfig(**base)


class NeuroBolt(nn.Module):
    """Two-branch EEG window encoder with a scalar regression head."""

    def __init__(self, cfg: NeuroBoltConfig):
        super().__init__()
        self.cfg = cfg
        self.channel_index = {label: i for i, label in enumerate(cfg.channel_labels)}
        self.st: STEncoder | None = None
        self.sp: SpecEncoder | None = None
        if cfg.branches in ("both", "st_only"):
            self.st = STEncoder(
                n_channels_max=cfg.n_channels_max,
                max_patches=cfg.patches_per_channel,
                w=cfg.patch_w,
                dim=cfg.embed_dim,
                depth=cfg.st_depth,
                n_heads=cfg.st_heads,
                ffn_ratio=cfg.ffn_ratio,
                drop_path=cfg.drop_path,
            )
        if cfg.branches in ("both", "spec_only"):
            self.sp = SpecEncoder(
                n_channels_max=cfg.n_channels_max,
                window_samples=cfg.window_samples,
                w_b=cfg.spec_base_w,
                L=cfg.scale_level,
                dim=cfg.embed_dim,
                depth=cfg.sp_depth,
                n_heads=cfg.sp_heads,
                rank=cfg.rank,
                ffn_ratio=cfg.ffn_ratio,
                dropout=cfg.sp_dropout,
                use_cls_token=cfg.use_cls_token,
            )
        self.head = nn.Linear(cfg.embed_dim, 1)
        trunc_normal_init(self.head)

    def resolve_channels(self, labels: list[str] | None) -> torch.Tensor:
        """Map channel labels to spatial-table indices."""
        if labels is None:
            labels = self.cfg.channel_labels
        try:
            ids = [self.channel_index[lab] for lab in labels]
        except KeyError as exc:
            known = ", ".join(self.cfg.channel_labels)
            raise KeyError(
                f"unknown channel label {exc.args[0]!r}; known channels: {known}"
            ) from None
        return torch.tensor(ids, dtype=torch.long)

    def representations(
        self, x: torch.Tensor, channel_ids: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(r_st, r_sp); a disabled branch yields a zero vector."""
        zeros = x.new_zeros(x.shape[0], self.cfg.embed_dim)
        r_st = self.st(x, channel_ids) if self.st is not None else zeros
        r_sp = self.sp(x, channel_ids) if self.sp is not None else zeros
        return r_st, r_sp

    def forward(self, x: torch.Tensor, channel_ids: torch.Tensor) -> torch.Tensor:
        """(B, C, T) -> (B,) scalar predictions."""
        if x.ndim != 3:
            raise ValueError(f"expected (batch, channels, samples), got {x.shape}")
        if not torch.isfinite(x).all():
            raise ValueError("input window contains non-finite values")
        r_st, r_sp = self.representations(x, channel_ids)
        return self.head(F.gelu(r_st + r_sp)).squeeze(-1)


def build_model(
    cfg: NeuroBoltConfig, dtype: torch.dtype = torch.float32
) -> NeuroBolt:
    """Construct a model with deterministic (seeded) initialization."""
    torch.manual_seed(cfg.seed)
    model = NeuroBolt(cfg)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


def predict(
    model: NeuroBolt, x: np.ndarray, channel_labels: list[str] | None = None
) -> float:
    """Single-window prediction in evaluation mode."""
    return float(predict_batch(model, np.asarray(x)[None], channel_labels)[0])


def predict_batch(
    model: NeuroBolt,
    xs: np.ndarray | list[np.ndarray],
    channel_labels: list[str] | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Elementwise-equal to looping :func:`predict`; stochastic layers off."""
    if isinstance(xs, list):
        if not xs:
            return np.zeros(0)
        xs = np.stack(xs)
    if xs.shape[0] == 0:
        return np.zeros(0)
    channel_ids = model.resolve_channels(channel_labels)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, xs.shape[0], batch_size):
            batch = torch.as_tensor(xs[i : i + batch_size], dtype=dtype)
            preds.append(model(batch, channel_ids).numpy())
    if was_training:
        model.train()
    return np.concatenate(preds).astype(np.float64)
