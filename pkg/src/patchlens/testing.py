"""Deterministic mock backends for synthetic end-to-end checks.

These backends read indicator images (pixel 1.0 = forged region, 0.0 =
pristine) and leak that information into the embedding or attention outputs,
so the tiling, fusion, and training machinery can be exercised without real
transformer weights.
"""

from __future__ import annotations

import numpy as np

from .planes import ImagePlane, PatchGridGeometry
from .vit import EmbeddingGrid


def _patch_means(window: ImagePlane, patch_size: int) -> np.ndarray:
    side = window.height // patch_size
    plane = window.data[:, :, 0]
    return plane.reshape(side, patch_size, side, patch_size).mean(axis=(1, 3)).reshape(-1)


class MaskLeakBackend:
    """Coordinate 0 of every patch embedding carries the patch's forged evidence.

    mode "mean": coord 0 = 2 * mean(pixels) - 1 (fractional evidence).
    mode "overlap": coord 0 = +1 if any pixel exceeds 0.5, else -1.
    """

    def __init__(self, patch_size: int = 14, window: int = 504, dim: int = 8,
                 mode: str = "mean"):
        if mode not in ("mean", "overlap"):
            raise ValueError(f"unknown leak mode {mode!r}")
        self.geometry = PatchGridGeometry.for_window(window, patch_size)
        self.dim = dim
        self.mode = mode
        self.descriptor = f"mock-leak(mode={mode},window={window},p={patch_size},D={dim})"

    @property
    def window(self) -> int:
        return self.geometry.window

    def embed(self, window: ImagePlane, want_attention: bool = False) -> EmbeddingGrid:
        p = self.geometry.patch_size
        if self.mode == "mean":
            evidence = 2.0 * _patch_means(window, p) - 1.0
        else:
            side = self.geometry.grid_h
            hits = (window.data[:, :, 0] > 0.5).reshape(side, p, side, p).any(axis=(1, 3))
            evidence = np.where(hits.reshape(-1), 1.0, -1.0)
        patches = np.zeros((self.geometry.num_patches, self.dim), dtype=np.float32)
        patches[:, 0] = evidence
        return EmbeddingGrid(
            geometry=self.geometry,
            cls=np.zeros(self.dim, dtype=np.float32),
            registers=np.zeros((0, self.dim), dtype=np.float32),
            patches=patches,
        )


class AttentionLeakBackend:
    """CLS attention of one informative head tracks per-patch forged fraction.

    The informative head's CLS row puts mass on patches proportionally to
    their forged fraction; every other head carries content-seeded noise.
    Noise heads must not be constant: min-max scaling is invariant to constant
    shifts, so constant heads would make the mixing weights unidentifiable.
    """

    def __init__(self, patch_size: int = 14, window: int = 504, dim: int = 8,
                 heads: int = 12, informative_head: int = 0, registers: int = 4):
        self.geometry = PatchGridGeometry.for_window(window, patch_size)
        self.dim = dim
        self.heads = heads
        self.informative_head = informative_head
        self.registers = registers
        self.descriptor = (
            f"mock-attn(informative={informative_head},heads={heads},window={window})"
        )

    @property
    def window(self) -> int:
        return self.geometry.window

    def embed(self, window: ImagePlane, want_attention: bool = False) -> EmbeddingGrid:
        from .backends import window_content_hash

        n = self.geometry.num_patches
        t = 1 + self.registers + n
        attn = None
        if want_attention:
            noise_rng = np.random.default_rng(
                int(window_content_hash(window)[:12], 16)
            )
            attn = np.empty((self.heads, t, t), dtype=np.float32)
            for m in range(self.heads):
                rows = noise_rng.random((t, t))
                attn[m] = (rows / rows.sum(axis=1, keepdims=True)).astype(np.float32)
            means = _patch_means(window, self.geometry.patch_size)
            row = np.zeros(t, dtype=np.float64)
            row[1 + self.registers :] = means + 1e-3
            row /= row.sum()
            attn[self.informative_head, 0, :] = row.astype(np.float32)
        return EmbeddingGrid(
            geometry=self.geometry,
            cls=np.zeros(self.dim, dtype=np.float32),
            registers=np.zeros((self.registers, self.dim), dtype=np.float32),
            patches=np.zeros((n, self.dim), dtype=np.float32),
            attentions_last=attn,
        )


def indicator_image(mask: np.ndarray, channels: int = 1) -> ImagePlane:
    """Turn a boolean mask into the indicator image the mock backends read."""
    plane = mask.astype(np.float32)
    return ImagePlane(np.repeat(plane[:, :, None], channels, axis=2))


def planted_square_mask(h: int, w: int, top: int, left: int, side: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[top : top + side, left : left + side] = True
    return mask
