"""Sliding-window inference: window planning, logit fusion, and crop-back.

Small inputs are upscaled so the short side reaches `min_size` (default 1016,
which guarantees a 5x5 window grid), then mirror-padded so the window lattice
tiles the plane exactly. Per-window patch logits are block-upsampled to pixel
resolution and summed into an accumulator; the fused heatmap is the per-pixel
mean logit, restored to source resolution before thresholding at 0. Summing
and averaging yield the same mask because every pixel is covered at least
once and the threshold is sign-based.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .backends import EmbeddingBackend
from .errors import ShapeError, UnsupportedOperationError
from .heads import Head, needs_attention, patch_logits, upsample_logits
from .planes import (
    BinaryMask,
    FloatPlane,
    ImagePlane,
    crop,
    mirror_pad,
    resize,
    resize_plane,
)
from .vit import EmbeddingGrid

DEFAULT_WINDOW = 504
DEFAULT_STRIDE = 128
DEFAULT_MIN_SIZE = 1016


@dataclass(frozen=True)
class WindowPlan:
    source_h: int
    source_w: int
    scale: Fraction  # >= 1, applied to both axes
    scaled_h: int
    scaled_w: int
    padded_h: int
    padded_w: int
    window: int
    stride: int
    origins: tuple[tuple[int, int], ...]

    @property
    def num_windows(self) -> int:
        return len(self.origins)

    @property
    def pad_bottom(self) -> int:
        return self.padded_h - self.scaled_h

    @property
    def pad_right(self) -> int:
        return self.padded_w - self.scaled_w

    def coverage_counts(self) -> np.ndarray:
        """Per-pixel window multiplicity on the padded plane."""
        counts = np.zeros((self.padded_h, self.padded_w), dtype=np.int32)
        for top, left in self.origins:
            counts[top : top + self.window, left : left + self.window] += 1
        return counts


def _ceil_scaled(value: int, scale: Fraction) -> int:
    return -((-value * scale.numerator) // scale.denominator)


def _pad_up(dim: int, window: int, stride: int) -> int:
    if dim <= window:
        return window
    return window + -((-(dim - window)) // stride) * stride


def plan_windows(h: int, w: int, window: int = DEFAULT_WINDOW,
                 stride: int = DEFAULT_STRIDE, min_size: int = DEFAULT_MIN_SIZE) -> WindowPlan:
    """Plan origins covering an h x w image.

    The upscale factor takes the short side to at least max(min_size, window);
    padding then extends each axis to the next stride-aligned window lattice.
    """
    if h < 1 or w < 1:
        raise ValueError(f"image dims must be positive, got {(h, w)}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    short = min(h, w)
    scale = max(Fraction(1), Fraction(max(min_size, window), short))
    scaled_h, scaled_w = _ceil_scaled(h, scale), _ceil_scaled(w, scale)
    padded_h, padded_w = _pad_up(scaled_h, window, stride), _pad_up(scaled_w, window, stride)
    tops = range(0, padded_h - window + 1, stride)
    lefts = range(0, padded_w - window + 1, stride)
    origins = tuple((t, l) for t in tops for l in lefts)
    return WindowPlan(h, w, scale, scaled_h, scaled_w, padded_h, padded_w,
                      window, stride, origins)


@dataclass
class LogitAccumulator:
    """Pixel-resolution logit sum plus coverage counts on the padded plane."""

    sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, h: int, w: int) -> "LogitAccumulator":
        return cls(np.zeros((h, w), dtype=np.float32), np.zeros((h, w), dtype=np.int32))

    def add(self, top: int, left: int, window_logits: np.ndarray) -> None:
        wh, ww = window_logits.shape
        self.sum[top : top + wh, left : left + ww] += window_logits
        self.count[top : top + wh, left : left + ww] += 1

    def mean(self) -> FloatPlane:
        if self.count.min() < 1:
            raise ShapeError("accumulator has uncovered pixels")
        out = self.sum.astype(np.float64) / self.count
        return FloatPlane(out.astype(np.float32))


@dataclass
class LocalizationResult:
    heatmap: FloatPlane  # mean logit per source pixel
    mask: BinaryMask  # heatmap > 0
    plan: WindowPlan
    timing: dict = field(default_factory=dict)


def restore_to_source(plane: FloatPlane, plan: WindowPlan,
                      kernel: str = "bilinear") -> FloatPlane:
    """Crop padding off a padded-plane map and resize it back to source dims."""
    from .planes import resample_array

    if (plane.height, plane.width) != (plan.padded_h, plan.padded_w):
        raise ShapeError(
            f"plane dims {(plane.height, plane.width)} do not match the plan's "
            f"padded dims {(plan.padded_h, plan.padded_w)}"
        )
    # slice (no copy), resample, and materialize a single output plane
    data = plane.data[: plan.scaled_h, : plan.scaled_w]
    if (plan.scaled_h, plan.scaled_w) != (plan.source_h, plan.source_w):
        data = resample_array(data, plan.source_h, plan.source_w, kernel)
    return FloatPlane(np.ascontiguousarray(data, dtype=np.float32))


def _prepare_padded(img: ImagePlane, plan: WindowPlan) -> ImagePlane:
    out = img
    if (plan.scaled_h, plan.scaled_w) != (img.height, img.width):
        out = resize(out, plan.scaled_h, plan.scaled_w, "bicubic")
    if plan.pad_right or plan.pad_bottom:
        out = mirror_pad(out, plan.pad_right, plan.pad_bottom)
    return out


def localize(img: ImagePlane, backend: EmbeddingBackend, head: Head,
             plan: WindowPlan | None = None, *, stride: int = DEFAULT_STRIDE,
             min_size: int = DEFAULT_MIN_SIZE, jobs: int = 1,
             threshold: float = 0.0) -> LocalizationResult:
    """Run the full sliding-window pipeline on one image."""
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    if plan is None:
        window = getattr(backend, "window", DEFAULT_WINDOW)
        plan = plan_windows(img.height, img.width, window=window, stride=stride,
                            min_size=min_size)
    timing["plan"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    padded = _prepare_padded(img, plan)
    timing["prepare"] = time.perf_counter() - t0

    want_attention = needs_attention(head)

    def eval_window(origin):
        top, left = origin
        try:
            window = crop(padded, top, left, plan.window, plan.window)
            grid = backend.embed(window, want_attention=want_attention)
            return upsample_logits(patch_logits(grid, head)).data
        except Exception as e:
            raise RuntimeError(f"window at origin ({top}, {left}) failed: {e}") from e

    t0 = time.perf_counter()
    acc = LogitAccumulator.zeros(plan.padded_h, plan.padded_w)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            # map preserves plan order, so accumulation stays deterministic
            for (top, left), logits in zip(plan.origins, pool.map(eval_window, plan.origins)):
                acc.add(top, left, logits)
    else:
        for top, left in plan.origins:
            acc.add(top, left, eval_window((top, left)))
    timing["embed_fuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    heatmap = restore_to_source(acc.mean(), plan)
    mask = BinaryMask(heatmap.data > threshold)
    timing["restore"] = time.perf_counter() - t0
    return LocalizationResult(heatmap=heatmap, mask=mask, plan=plan, timing=timing)


def single_window_plan(window: int = DEFAULT_WINDOW) -> WindowPlan:
    return WindowPlan(window, window, Fraction(1), window, window, window, window,
                      window, window, ((0, 0),))


def localize_single_window(img: ImagePlane, backend: EmbeddingBackend,
                           head: Head) -> LocalizationResult:
    """Fast path for inputs already at window size: one window, no upscale."""
    window = getattr(backend, "window", DEFAULT_WINDOW)
    if (img.height, img.width) != (window, window):
        raise ValueError(
            f"single-window localization needs a {window}x{window} input, "
            f"got {img.height}x{img.width}"
        )
    return localize(img, backend, head, plan=single_window_plan(window))


def detect_five_crop(img: ImagePlane, backend: EmbeddingBackend,
                     classify: Callable[[EmbeddingGrid], np.ndarray] | None,
                     fake_index: int = 1) -> float:
    """Whole-image detector: average class probability over corner and center crops."""
    if classify is None:
        raise UnsupportedOperationError("five-crop detection needs an image-level classifier")
    w = getattr(backend, "window", DEFAULT_WINDOW)
    if min(img.height, img.width) < w:
        scale = w / min(img.height, img.width)
        img = resize(img, max(w, int(np.ceil(img.height * scale))),
                     max(w, int(np.ceil(img.width * scale))), "bicubic")
    h_img, w_img = img.height, img.width
    origins = [
        (0, 0),
        (0, w_img - w),
        (h_img - w, 0),
        (h_img - w, w_img - w),
        ((h_img - w) // 2, (w_img - w) // 2),
    ]
    probs = [classify(backend.embed(crop(img, t, l, w, w))) for t, l in origins]
    return float(np.mean([p[fake_index] for p in probs]))
