"""Image, mask, and dense-grid value types plus the geometry primitives built on them.

Conventions fixed here and relied on everywhere else:

* pixel values are float32 in [0, 1]; 8-bit sources are divided by 255 on
  ingestion and written back with round(v * 255),
* arrays are row-major with shape (height, width[, channels]), RGB order,
* binary masks resize only with the nearest kernel so they stay binary,
* mirror padding reflects without repeating the edge row/column (reflect-101).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import BadMagicError, FormatError, ShapeError, TruncatedError

FLOATPLANE_MAGIC = b"FPLANE01"

# Filter support radii at scale 1.
_KERNEL_SUPPORT = {"bicubic": 2.0, "lanczos": 3.0, "bilinear": 1.0}


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def _minmax(arr: np.ndarray) -> tuple[float, float]:
    """Min and max in two temp-free passes; NaN propagates into the result."""
    if arr.size == 0:
        return 0.0, 0.0
    return float(arr.min()), float(arr.max())


@dataclass(frozen=True)
class ImagePlane:
    """An RGB or grayscale image held as float32 in [0, 1], shape (h, w, c)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"image data must be (h, w, 1|3), got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        lo, hi = _minmax(arr)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("image contains non-finite values")
        if lo < 0.0 or hi > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImagePlane":
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(arr.astype(np.float32) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.data * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel forged/pristine labels, shape (h, w), True = forged."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=bool)
        if arr.ndim != 2:
            raise ShapeError(f"mask data must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def forged_pixels(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class FloatPlane:
    """A single-channel float32 plane (logit maps, probability maps, heatmaps)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"float plane must be 2-D, got shape {arr.shape}")
        lo, hi = _minmax(arr)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("float plane contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PatchGridGeometry:
    """Square token-grid geometry of one backbone window."""

    patch_size: int = 14
    grid_h: int = 36
    grid_w: int = 36

    def __post_init__(self):
        _require(self.patch_size >= 1, "patch_size must be >= 1")
        _require(self.grid_h >= 1 and self.grid_w >= 1, "grid dims must be >= 1")

    @property
    def window(self) -> int:
        if self.grid_h != self.grid_w:
            raise ShapeError("window is defined only for square grids")
        return self.patch_size * self.grid_h

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @classmethod
    def for_window(cls, window: int, patch_size: int) -> "PatchGridGeometry":
        if window % patch_size != 0:
            raise ValueError(f"window {window} not divisible by patch size {patch_size}")
        side = window // patch_size
        return cls(patch_size=patch_size, grid_h=side, grid_w=side)


# ---------------------------------------------------------------------------
# Resampling


def _bicubic_kernel(x: np.ndarray) -> np.ndarray:
    # Catmull-Rom variant, a = -0.5.
    a = -0.5
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _lanczos_kernel(x: np.ndarray) -> np.ndarray:
    taps = 3.0
    out = np.sinc(x) * np.sinc(x / taps)
    return np.where(np.abs(x) < taps, out, 0.0)


def _bilinear_kernel(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


_KERNEL_FN = {
    "bicubic": _bicubic_kernel,
    "lanczos": _lanczos_kernel,
    "bilinear": _bilinear_kernel,
}


def _axis_weights(src_len: int, dst_len: int, kernel: str):
    """Tap indices and normalized weights mapping src_len samples to dst_len.

    The kernel is widened by the scale factor when downscaling so that
    reductions are antialiased; edge handling clamps to the border sample.
    """
    scale = src_len / dst_len
    spread = max(scale, 1.0)
    support = _KERNEL_SUPPORT[kernel] * spread
    centers = (np.arange(dst_len, dtype=np.float64) + 0.5) * scale - 0.5
    first = np.ceil(centers - support).astype(np.int64)
    ntaps = int(np.floor(2.0 * support)) + 2
    idx = first[:, None] + np.arange(ntaps, dtype=np.int64)[None, :]
    dist = (centers[:, None] - idx) / spread
    weights = _KERNEL_FN[kernel](dist)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, src_len - 1)
    return idx, weights


def _nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    scale = src_len / dst_len
    idx = np.floor((np.arange(dst_len, dtype=np.float64) + 0.5) * scale).astype(np.int64)
    return np.clip(idx, 0, src_len - 1)


def _resample_axis(arr: np.ndarray, dst_len: int, kernel: str, axis: int) -> np.ndarray:
    src_len = arr.shape[axis]
    if src_len == dst_len:
        # Identity mapping for every kernel: centers align exactly.
        return arr
    if kernel == "nearest":
        return np.take(arr, _nearest_indices(src_len, dst_len), axis=axis)
    idx, weights = _axis_weights(src_len, dst_len, kernel)
    moved = np.moveaxis(arr, axis, 0).astype(np.float64)
    out = np.zeros((dst_len,) + moved.shape[1:], dtype=np.float64)
    shape = (-1,) + (1,) * (moved.ndim - 1)
    # Accumulate tap by tap to keep peak memory at one (dst, ...) buffer.
    for t in range(idx.shape[1]):
        out += weights[:, t].reshape(shape) * moved[idx[:, t]]
    return np.moveaxis(out, 0, axis)


def resample_array(arr: np.ndarray, new_h: int, new_w: int, kernel: str) -> np.ndarray:
    """Separable resize of a (h, w[, c]) array; no value clamping."""
    if kernel not in ("nearest", *_KERNEL_FN):
        raise ValueError(f"unknown kernel {kernel!r}")
    _require(new_h >= 1 and new_w >= 1, "target dimensions must be >= 1")
    out = _resample_axis(arr, new_h, kernel, axis=0)
    out = _resample_axis(out, new_w, kernel, axis=1)
    return out


def resize(img: ImagePlane, new_h: int, new_w: int, kernel: str = "bicubic") -> ImagePlane:
    """Resize an image with the given kernel; output values are clamped to [0, 1]."""
    out = resample_array(img.data, new_h, new_w, kernel)
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32))


def resize_mask(mask: BinaryMask, new_h: int, new_w: int) -> BinaryMask:
    """Resize a mask with the nearest kernel (the only kernel that keeps it binary)."""
    out = resample_array(mask.data.astype(np.uint8), new_h, new_w, "nearest")
    return BinaryMask(out.astype(bool))


def resize_plane(plane: FloatPlane, new_h: int, new_w: int, kernel: str = "bilinear") -> FloatPlane:
    """Resize a float plane without clamping (logit maps may be negative)."""
    out = resample_array(plane.data, new_h, new_w, kernel)
    return FloatPlane(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Padding and cropping


def _reflect_indices(length: int, pad: int) -> np.ndarray:
    base = np.arange(length)
    if pad == 0:
        return base
    if pad >= length - 1:
        raise ValueError(f"reflect-101 pad {pad} needs source dim > {pad + 1}, got {length}")
    tail = length - 2 - np.arange(pad)
    return np.concatenate([base, tail])


def mirror_pad_array(arr: np.ndarray, pad_right: int, pad_bottom: int) -> np.ndarray:
    _require(pad_right >= 0 and pad_bottom >= 0, "pad amounts must be >= 0")
    rows = _reflect_indices(arr.shape[0], pad_bottom)
    cols = _reflect_indices(arr.shape[1], pad_right)
    return arr[rows][:, cols]


def mirror_pad(img: ImagePlane, pad_right: int, pad_bottom: int) -> ImagePlane:
    """Extend an image right/bottom by reflect-101 (edge row/column not repeated)."""
    return ImagePlane(mirror_pad_array(img.data, pad_right, pad_bottom))


def mirror_pad_mask(mask: BinaryMask, pad_right: int, pad_bottom: int) -> BinaryMask:
    return BinaryMask(mirror_pad_array(mask.data, pad_right, pad_bottom))


def crop_array(arr: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    _require(h >= 1 and w >= 1, "crop dims must be >= 1")
    _require(top >= 0 and left >= 0, "crop origin must be >= 0")
    if top + h > arr.shape[0] or left + w > arr.shape[1]:
        raise ValueError(
            f"crop window {(top, left, h, w)} exceeds bounds {arr.shape[:2]}"
        )
    return arr[top : top + h, left : left + w].copy()


def crop(img: ImagePlane, top: int, left: int, h: int, w: int) -> ImagePlane:
    """Exact sub-buffer copy of the given window."""
    return ImagePlane(crop_array(img.data, top, left, h, w))


def crop_mask(mask: BinaryMask, top: int, left: int, h: int, w: int) -> BinaryMask:
    return BinaryMask(crop_array(mask.data, top, left, h, w))


def crop_plane(plane: FloatPlane, top: int, left: int, h: int, w: int) -> FloatPlane:
    return FloatPlane(crop_array(plane.data, top, left, h, w))


# ---------------------------------------------------------------------------
# File I/O


def read_image(path) -> ImagePlane:
    """Read a PNG or JPEG file as an RGB or grayscale ImagePlane."""
    with Image.open(path) as im:
        mode = "L" if im.mode in ("L", "1", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode))
    return ImagePlane.from_uint8(arr)


def write_image(img: ImagePlane, path) -> None:
    """Write an image as 8-bit PNG (no ancillary metadata chunks)."""
    arr = img.to_uint8()
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], "L")
    else:
        pil = Image.fromarray(arr, "RGB")
    pil.save(path, format="PNG")


def read_mask(path) -> BinaryMask:
    """Read a mask PNG; any value >= 128 counts as forged."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr >= 128)


def write_mask(mask: BinaryMask, path) -> None:
    """Write a mask as single-channel PNG with forged=255, pristine=0."""
    arr = np.where(mask.data, 255, 0).astype(np.uint8)
    Image.fromarray(arr, "L").save(path, format="PNG")


def write_float_plane(plane: FloatPlane, path) -> None:
    """Raw little-endian float32 stream with an (magic, h, w) header."""
    header = FLOATPLANE_MAGIC + struct.pack("<II", plane.height, plane.width)
    payload = plane.data.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_float_plane(path) -> FloatPlane:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(FLOATPLANE_MAGIC) + 8:
        raise TruncatedError("float plane file shorter than its header")
    if blob[: len(FLOATPLANE_MAGIC)] != FLOATPLANE_MAGIC:
        raise BadMagicError(f"expected magic {FLOATPLANE_MAGIC!r}")
    h, w = struct.unpack_from("<II", blob, len(FLOATPLANE_MAGIC))
    start = len(FLOATPLANE_MAGIC) + 8
    expected = h * w * 4
    if len(blob) - start != expected:
        raise TruncatedError(f"expected {expected} payload bytes, got {len(blob) - start}")
    data = np.frombuffer(blob, dtype="<f4", offset=start).reshape(h, w)
    return FloatPlane(data)


def write_overlay(img: ImagePlane, mask: BinaryMask, path, alpha: float = 0.5) -> None:
    """Write the image with forged pixels blended toward solid red."""
    if (img.height, img.width) != (mask.height, mask.width):
        raise ShapeError("overlay image and mask dims differ")
    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    red = np.zeros_like(rgb)
    red[:, :, 0] = 1.0
    m = mask.data[:, :, None].astype(np.float32) * alpha
    write_image(ImagePlane(rgb * (1.0 - m) + red * m), path)
