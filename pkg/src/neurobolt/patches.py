"""Segmentation of multichannel EEG windows into fixed-length patches.

Both encoder branches consume the same non-overlapping per-channel
patches; with stride ``s == w`` a ``C x T`` window yields
``C * floor(T / w)`` of them. Remainder samples are dropped, never padded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PatchGrid:
    """Per-channel patch stack of shape (channels, patches, patch_len)."""

    patches: np.ndarray
    w: int
    s: int

    def __post_init__(self) -> None:
        self.patches = np.asarray(self.patches)
        if self.patches.ndim != 3:
            raise ValueError(f"patches must be 3-D, got shape {self.patches.shape}")
        if self.patches.shape[2] != self.w:
            raise ValueError(
                f"patch length {self.patches.shape[2]} does not match w={self.w}"
            )
        if self.s <= 0:
            raise ValueError(f"stride must be positive, got {self.s}")

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]

    @property
    def patches_per_channel(self) -> int:
        return self.patches.shape[1]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0] * self.patches.shape[1]


def patch_count(n_samples: int, w: int, s: int) -> int:
    """Number of patches per channel: floor((T - w) / s) + 1."""
    return (n_samples - w) // s + 1


def patch(x: np.ndarray, w: int, s: int | None = None) -> PatchGrid:
    """Slice a ``C x T`` window into patches of ``w`` samples, stride ``s``.

    Defaults to non-overlapping patches (``s = w``). Every patch is an
    exact slice ``x[c, k*s : k*s + w]``.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D channels-x-samples array, got {x.shape}")
    if s is None:
        s = w
    n_samples = x.shape[1]
    if w <= 0:
        raise ValueError(f"patch length must be positive, got {w}")
    if w > n_samples:
        raise ValueError(f"patch length {w} exceeds window length {n_samples}")
    if s <= 0:
        raise ValueError(f"stride must be positive, got {s}")
    windows = np.lib.stride_tricks.sliding_window_view(x, w, axis=1)
    return PatchGrid(np.ascontiguousarray(windows[:, ::s, :]), w, s)
