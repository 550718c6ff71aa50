"""Spatiotemporal branch: per-patch temporal encoder, trainable temporal
and spatial embeddings, dense-attention transformer, average pooling.

The temporal encoder maps each raw patch independently (three 1-D conv
blocks with kernel 15, group norm and GELU, flattened into a linear
projection), so identical patches always produce identical embeddings
regardless of position.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class DropPath(nn.Module):
    """Stochastic depth: drop a residual branch per sample while training."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"drop path rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.bernoulli(torch.full(shape, keep, device=x.device, dtype=x.dtype))
        return x * mask / keep


class MultiheadSelfAttention(nn.Module):
    """Standard dense softmax self-attention with an output projection."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + drop_path(attn(ln(x))), x + drop_path(mlp(ln(x)))."""

    def __init__(self, dim: int, n_heads: int, ffn_ratio: int, drop_path: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, ffn_ratio * dim),
            nn.GELU(),
            nn.Linear(ffn_ratio * dim, dim),
        )
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class TemporalPatchEncoder(nn.Module):
    """Per-patch map from ``w`` raw samples to a ``d``-vector."""

    def __init__(self, w: int, dim: int, hidden: int = 16):
        super().__init__()
        self.w = w
        self.conv = nn.Sequential(
            nn.Conv1d(1, hidden, kernel_size=15, stride=8, padding=7),
            nn.GroupNorm(4, hidden),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=15, stride=1, padding=7),
            nn.GroupNorm(4, hidden),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=15, stride=1, padding=7),
            nn.GroupNorm(4, hidden),
            nn.GELU(),
        )
        conv_len = (w - 1) // 8 + 1
        self.proj = nn.Linear(hidden * conv_len, dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(..., w) -> (..., d), each patch mapped independently."""
        lead = patches.shape[:-1]
        flat = patches.reshape(-1, 1, self.w)
        feats = self.conv(flat).flatten(1)
        return self.proj(feats).reshape(*lead, -1)


class STEncoder(nn.Module):
    """Patch embeddings + temporal/spatial embeddings + transformer + mean pool.

    ``n_channels_max`` rows of the spatial table are addressed by channel
    index, so any subset or ordering of known channels is a valid input.
    """

    def __init__(
        self,
        n_channels_max: int,
        max_patches: int,
        w: int,
        dim: int,
        depth: int,
        n_heads: int,
        ffn_ratio: int = 4,
        drop_path: float = 0.0,
    ):
        super().__init__()
        self.w = w
        self.dim = dim
        self.patch_embed = TemporalPatchEncoder(w, dim)
        self.te = nn.Parameter(torch.zeros(max_patches, dim))
        self.se = nn.Parameter(torch.zeros(n_channels_max, dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, ffn_ratio, drop_path) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)
        trunc_normal_init(self)
        nn.init.trunc_normal_(self.te, std=0.02)
        nn.init.trunc_normal_(self.se, std=0.02)

    def encode_patches(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, T) -> (B, C, K, d): non-overlapping patches through the
        temporal encoder. Remainder samples beyond K*w are dropped."""
        b, c, t = x.shape
        if t < self.w:
            raise ValueError(f"window length {t} shorter than patch width {self.w}")
        k = t // self.w
        patches = x[:, :, : k * self.w].reshape(b, c, k, self.w)
        return self.patch_embed(patches)

    def add_pos_embeddings(
        self, e: torch.Tensor, channel_ids: torch.Tensor
    ) -> torch.Tensor:
        """out[c, k] = e[c, k] + te[k] + se[channel_ids[c]]."""
        k = e.shape[-2]
        if k > self.te.shape[0]:
            raise ValueError(
                f"{k} patches exceed the {self.te.shape[0]} temporal embeddings"
            )
        if channel_ids.max() >= self.se.shape[0] or channel_ids.min() < 0:
            raise ValueError("channel id out of range of the spatial table")
        return e + self.te[:k] + self.se[channel_ids].unsqueeze(-2)

    def forward_tokens(
        self, x: torch.Tensor, channel_ids: torch.Tensor
    ) -> torch.Tensor:
        """Token-level outputs, shape (B, C*K, d)."""
        e = self.encode_patches(x)
        e = self.add_pos_embeddings(e, channel_ids)
        b = e.shape[0]
        tokens = e.reshape(b, -1, self.dim)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, x: torch.Tensor, channel_ids: torch.Tensor) -> torch.Tensor:
        """Pooled spatiotemporal representation, shape (B, d)."""
        return self.forward_tokens(x, channel_ids).mean(dim=1)
