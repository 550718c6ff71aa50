"""Multi-scale spectral branch: dyadic STFT pyramid, per-level frequency
and window projections, level fusion, and a low-rank linear-attention
transformer pooled into the spectral representation.

Magnitude convention: one-sided spectra with interior bins scaled by
sqrt(2), so the sum of squared magnitudes of a patch equals the patch
length times its sum of squared samples (discrete Parseval identity).
DC and Nyquist bins are unscaled, so a constant input of value ``a``
yields magnitude ``w * |a|`` at bin 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass
class SpectralPyramid:
    """Magnitude spectra at dyadically growing window sizes.

    ``levels[l]`` has shape (channels, floor(T / w_l), w_l/2 + 1) with
    w_l = w_b * 2**l.
    """

    levels: list[np.ndarray]
    w_b: int
    L: int

    def __post_init__(self) -> None:
        if len(self.levels) != self.L + 1:
            raise ValueError(
                f"expected {self.L + 1} levels, got {len(self.levels)}"
            )
        for l, s in enumerate(self.levels):
            w_l = self.w_b * 2**l
            if s.ndim != 3 or s.shape[2] != w_l // 2 + 1:
                raise ValueError(
                    f"level {l} must have {w_l // 2 + 1} bins, got shape {s.shape}"
                )
            if np.any(s < 0):
                raise ValueError(f"level {l} contains negative magnitudes")

    @property
    def window_counts(self) -> list[int]:
        return [s.shape[1] for s in self.levels]

    @property
    def bin_counts(self) -> list[int]:
        return [s.shape[2] for s in self.levels]


def _scaled_magnitude_np(segments: np.ndarray) -> np.ndarray:
    """|rfft| with interior bins scaled by sqrt(2) (energy-preserving)."""
    mag = np.abs(np.fft.rfft(segments, axis=-1))
    mag[..., 1:-1] *= math.sqrt(2.0)
    return mag


def multiscale_spectra(x: np.ndarray, w_b: int, L: int) -> SpectralPyramid:
    """Magnitude spectra of non-overlapping patches at levels 0..L.

    Plain rectangular analysis windows; FFT size equals the window length
    (no padding). Requires ``T`` divisible by the largest window
    ``w_b * 2**L`` and an even base window.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D channels-x-samples array, got {x.shape}")
    if w_b <= 0 or w_b % 2 != 0:
        raise ValueError(f"base window must be positive and even, got {w_b}")
    if L < 0:
        raise ValueError(f"level count must be nonnegative, got {L}")
    c, t = x.shape
    w_max = w_b * 2**L
    if t % w_max != 0:
        raise ValueError(
            f"window length {t} is not divisible by the largest scale {w_max}"
        )
    levels = []
    for l in range(L + 1):
        w_l = w_b * 2**l
        segments = x.reshape(c, t // w_l, w_l)
        levels.append(_scaled_magnitude_np(segments))
    return SpectralPyramid(levels=levels, w_b=w_b, L=L)


def linear_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    e: torch.Tensor,
    f: torch.Tensor,
) -> torch.Tensor:
    """Single-head rank-D attention.

    ``softmax((X Wq)(E X Wk)^T / sqrt(k)) @ (F X Wv)`` with the softmax
    taken over the D axis; E and F are (D, N), so cost is linear in N for
    fixed D. With D = N and identity E, F this is exactly dense softmax
    self-attention (without output projection).
    """
    n = x.shape[0]
    d_rank = e.shape[0]
    if d_rank > n:
        raise ValueError(f"rank D={d_rank} exceeds token count N={n}")
    k_dim = w_q.shape[1]
    q = x @ w_q
    k = (e @ x) @ w_k
    v = (f @ x) @ w_v
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(k_dim)
    return scores.softmax(dim=-1) @ v


class LinearSelfAttention(nn.Module):
    """Multi-head rank-D self-attention with E, F shared across heads.

    E and F hold one column per token slot of the full layout
    (optional class token first, then ``n`` slots per known channel);
    forwards over a channel subset gather the matching columns.
    """

    def __init__(self, dim: int, n_heads: int, n_tokens_max: int, rank: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        if rank <= 0:
            raise ValueError(f"rank must be positive, got {rank}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.rank = rank
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.e = nn.Parameter(torch.zeros(rank, n_tokens_max))
        self.f = nn.Parameter(torch.zeros(rank, n_tokens_max))
        nn.init.trunc_normal_(self.e, std=1.0 / math.sqrt(n_tokens_max))
        nn.init.trunc_normal_(self.f, std=1.0 / math.sqrt(n_tokens_max))

    def forward(self, x: torch.Tensor, token_cols: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        if self.rank > n:
            raise ValueError(f"rank D={self.rank} exceeds token count N={n}")
        e = self.e[:, token_cols]
        f = self.f[:, token_cols]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        k = e @ k  # (B, D, dim)
        v = f @ v
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, self.rank, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, self.rank, self.n_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class SpectralBlock(nn.Module):
    """Pre-norm linear-attention block with dropout right after attention."""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        n_tokens_max: int,
        rank: int,
        ffn_ratio: int,
        dropout: float,
    ):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = LinearSelfAttention(dim, n_heads, n_tokens_max, rank)
        self.drop = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, ffn_ratio * dim),
            nn.GELU(),
            nn.Linear(ffn_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor, token_cols: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x), token_cols))
        x = x + self.mlp(self.norm2(x))
        return x


class SpecEncoder(nn.Module):
    """Spectral pyramid -> common C x n x d embedding -> linear transformer.

    Every level maps through a frequency projection (bins -> d) and a
    window projection (window count -> n along the time axis); levels are
    summed and a per-channel spatial embedding is added before encoding.
    """

    def __init__(
        self,
        n_channels_max: int,
        window_samples: int,
        w_b: int,
        L: int,
        dim: int,
        depth: int,
        n_heads: int,
        rank: int,
        ffn_ratio: int = 4,
        dropout: float = 0.1,
        use_cls_token: bool = False,
    ):
        super().__init__()
        if w_b <= 0 or w_b % 2 != 0:
            raise ValueError(f"base window must be positive and even, got {w_b}")
        w_max = w_b * 2**L
        if window_samples % w_max != 0:
            raise ValueError(
                f"window length {window_samples} not divisible by largest "
                f"scale {w_max}"
            )
        self.window_samples = window_samples
        self.w_b = w_b
        self.L = L
        self.dim = dim
        self.n = window_samples // w_b
        self.use_cls_token = use_cls_token
        self.fe = nn.ModuleList(
            nn.Linear(w_b * 2**l // 2 + 1, dim) for l in range(L + 1)
        )
        self.we = nn.ModuleList(
            nn.Linear(window_samples // (w_b * 2**l), self.n) for l in range(L + 1)
        )
        self.se_sp = nn.Parameter(torch.zeros(n_channels_max, dim))
        self.cls_token = (
            nn.Parameter(torch.zeros(dim)) if use_cls_token else None
        )
        n_tokens_max = n_channels_max * self.n + (1 if use_cls_token else 0)
        self.blocks = nn.ModuleList(
            SpectralBlock(dim, n_heads, n_tokens_max, rank, ffn_ratio, dropout)
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)
        for lin in list(self.fe) + list(self.we):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        for block in self.blocks:
            for m in (block.attn.qkv, block.attn.proj, *block.mlp):
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=0.02)
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.se_sp, std=0.02)
        if self.cls_token is not None:
            nn.init.trunc_normal_(self.cls_token, std=0.02)

    def compute_pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        """(B, C, T) -> list of (B, C, T/w_l, w_l/2+1) scaled magnitudes."""
        b, c, t = x.shape
        if t != self.window_samples:
            raise ValueError(
                f"expected windows of {self.window_samples} samples, got {t}"
            )
        levels = []
        for l in range(self.L + 1):
            w_l = self.w_b * 2**l
            segments = x.reshape(b, c, t // w_l, w_l)
            mag = torch.fft.rfft(segments, dim=-1).abs()
            scale = torch.ones(mag.shape[-1], dtype=x.dtype, device=x.device)
            scale[1:-1] = math.sqrt(2.0)
            levels.append(mag * scale)
        return levels

    def embed_level(self, s_l: torch.Tensor, level: int) -> torch.Tensor:
        """(B, C, m_l, bins_l) -> (B, C, n, d): frequency projection then
        window projection along the time axis."""
        fe = self.fe[level](s_l)
        return self.we[level](fe.transpose(-1, -2)).transpose(-1, -2)

    def fuse_levels(
        self, embedded: list[torch.Tensor], channel_ids: torch.Tensor
    ) -> torch.Tensor:
        """Sum over levels plus the spatial embedding, broadcast over n."""
        e_sp = embedded[0]
        for level in embedded[1:]:
            if level.shape != e_sp.shape:
                raise ValueError("all levels must share the fused shape")
            e_sp = e_sp + level
        return e_sp + self.se_sp[channel_ids].unsqueeze(-2)

    def token_columns(self, channel_ids: torch.Tensor) -> torch.Tensor:
        """Columns of E/F matching the token layout for these channels."""
        offset = 1 if self.use_cls_token else 0
        cols = offset + (
            channel_ids.unsqueeze(1) * self.n + torch.arange(self.n)
        ).reshape(-1)
        if self.use_cls_token:
            cols = torch.cat([torch.zeros(1, dtype=torch.long), cols])
        return cols

    def forward_tokens(
        self, x: torch.Tensor, channel_ids: torch.Tensor
    ) -> torch.Tensor:
        """Token-level outputs, shape (B, C*n (+1 cls), d)."""
        pyramid = self.compute_pyramid(x)
        embedded = [self.embed_level(s_l, l) for l, s_l in enumerate(pyramid)]
        e_sp = self.fuse_levels(embedded, channel_ids)
        b = e_sp.shape[0]
        tokens = e_sp.reshape(b, -1, self.dim)
        if self.cls_token is not None:
            cls = self.cls_token.expand(b, 1, self.dim)
            tokens = torch.cat([cls, tokens], dim=1)
        cols = self.token_columns(channel_ids)
        for block in self.blocks:
            tokens = block(tokens, cols)
        return self.norm(tokens)

    def forward(self, x: torch.Tensor, channel_ids: torch.Tensor) -> torch.Tensor:
        """Pooled spectral representation, shape (B, d)."""
        return self.forward_tokens(x, channel_ids).mean(dim=1)
