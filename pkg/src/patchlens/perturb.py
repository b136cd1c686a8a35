"""Seedable image degradations: the robustness grid and training augmentations.

Two distinct consumers with deliberately separate conventions:

* the robustness evaluation grid (JPEG, double JPEG, bicubic resize, additive
  Gaussian noise), applied to test images with fixed severity levels,
* the stochastic training augmentation pipeline producing 504x504 crops,
  where geometric stages co-transform the ground-truth mask (nearest kernel)
  and photometric stages touch the image only.

Noise sigmas are specified on the 8-bit scale and divided by 255 internally.
Robustness resizes use bicubic; augmentation resizes use Lanczos.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .planes import BinaryMask, ImagePlane, resample_array, resize, resize_mask

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# JPEG codec


def codec_descriptor() -> str:
    from PIL import __version__ as pil_version
    from PIL import features

    jpeg = features.version("jpg")
    turbo = "turbo" if features.check_feature("libjpeg_turbo") else "ijg"
    return f"pillow-{pil_version}/libjpeg-{jpeg}-{turbo}"


def jpeg_round_trip(img: ImagePlane, quality: int) -> ImagePlane:
    """Encode/decode through JPEG; 4:2:0 subsampling below quality 95, else 4:4:4."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    arr = img.to_uint8()
    buf = io.BytesIO()
    if img.channels == 3:
        pil = Image.fromarray(arr, "RGB")
        pil.save(buf, format="JPEG", quality=quality,
                 subsampling=0 if quality >= 95 else 2)
    else:
        pil = Image.fromarray(arr[:, :, 0], "L")
        pil.save(buf, format="JPEG", quality=quality)
    with Image.open(io.BytesIO(buf.getvalue())) as decoded:
        out = np.asarray(decoded.convert("RGB" if img.channels == 3 else "L"))
    if out.ndim == 2:
        out = out[:, :, None]
    return ImagePlane.from_uint8(out)


def add_gaussian_noise(img: ImagePlane, sigma_8bit: float, seed: int) -> ImagePlane:
    if sigma_8bit < 0:
        raise ValueError("sigma must be >= 0")
    if sigma_8bit == 0:
        return img
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma_8bit / 255.0, size=img.data.shape)
    return ImagePlane(np.clip(img.data + noise, 0.0, 1.0).astype(np.float32))


def psnr(a: ImagePlane, b: ImagePlane) -> float:
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Robustness perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # none | jpeg | double_jpeg | resize | gauss_noise
    quality: int | None = None
    quality2: int | None = None
    scale_percent: float | None = None
    sigma: float | None = None  # 8-bit units
    kernel: str = "bicubic"

    def __post_init__(self):
        if self.kind not in ("none", "jpeg", "double_jpeg", "resize", "gauss_noise"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind in ("jpeg", "double_jpeg") and not 1 <= (self.quality or 0) <= 100:
            raise ValueError("JPEG quality must be in [1, 100]")
        if self.kind == "double_jpeg" and not 1 <= (self.quality2 or 0) <= 100:
            raise ValueError("second JPEG quality must be in [1, 100]")
        if self.kind == "resize" and (self.scale_percent is None or self.scale_percent <= 0):
            raise ValueError("resize scale must be positive")
        if self.kind == "gauss_noise" and (self.sigma is None or self.sigma < 0):
            raise ValueError("noise sigma must be >= 0")

    @property
    def tag(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "jpeg":
            return f"jpeg-q{self.quality}"
        if self.kind == "double_jpeg":
            return f"djpeg-{self.quality}-{self.quality2}"
        if self.kind == "resize":
            return f"resize-{self.scale_percent:g}"
        return f"noise-{self.sigma:g}"

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def jpeg(cls, quality: int):
        return cls("jpeg", quality=quality)

    @classmethod
    def double_jpeg(cls, q1: int, q2: int):
        return cls("double_jpeg", quality=q1, quality2=q2)

    @classmethod
    def resize(cls, scale_percent: float):
        return cls("resize", scale_percent=scale_percent)

    @classmethod
    def gauss_noise(cls, sigma: float):
        return cls("gauss_noise", sigma=sigma)


def resized_dims(h: int, w: int, scale_percent: float) -> tuple[int, int]:
    return max(1, round(h * scale_percent / 100.0)), max(1, round(w * scale_percent / 100.0))


def apply(img: ImagePlane, spec: PerturbationSpec, seed: int = 0) -> ImagePlane:
    """Apply one perturbation; pure in (image bytes, spec, seed)."""
    if spec.kind == "none":
        return img
    if spec.kind == "jpeg":
        return jpeg_round_trip(img, spec.quality)
    if spec.kind == "double_jpeg":
        return jpeg_round_trip(jpeg_round_trip(img, spec.quality), spec.quality2)
    if spec.kind == "resize":
        nh, nw = resized_dims(img.height, img.width, spec.scale_percent)
        return resize(img, nh, nw, spec.kernel)
    return add_gaussian_noise(img, spec.sigma, seed)


def co_transform_mask(gt: BinaryMask, spec: PerturbationSpec) -> BinaryMask:
    """Ground-truth counterpart of apply(): only geometry changes the mask."""
    if spec.kind == "resize":
        nh, nw = resized_dims(gt.height, gt.width, spec.scale_percent)
        return resize_mask(gt, nh, nw)
    return gt


def robustness_grid() -> list[PerturbationSpec]:
    """The 15-spec evaluation grid (baseline plus four perturbation families)."""
    specs = [PerturbationSpec.none()]
    specs += [PerturbationSpec.jpeg(q) for q in (100, 80, 60, 40)]
    specs += [PerturbationSpec.double_jpeg(90, q2) for q2 in (90, 60, 40)]
    specs += [PerturbationSpec.resize(s) for s in (50, 150, 200)]
    specs += [PerturbationSpec.gauss_noise(s) for s in (3, 7, 15, 19)]
    return specs


# ---------------------------------------------------------------------------
# Training augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stage probabilities and parameter ranges for training crops.

    Branch order inside the one-of group: random-resized-crop, random crop,
    direct resize, upscale-then-crop. Color jitter factors are fixed ranges
    recorded here so runs are reproducible.
    """

    out_size: int = 504
    hflip_p: float = 0.5
    rot90_p: float = 1.0
    branch_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    rrc_scale: tuple = (0.1, 1.0)
    upscale_factors: tuple = (2.0, 3.0)
    blur_p: float = 0.1
    blur_kernels: tuple = (3, 4, 5)
    noise_p: float = 0.1
    noise_sigma: tuple = (0.2, 0.44)  # 8-bit std
    jitter_p: float = 0.1
    jitter_factor: tuple = (0.8, 1.2)  # brightness/contrast/saturation
    jitter_hue: float = 0.02
    jpeg_p: float = 0.5
    jpeg_quality: tuple = (40, 100)
    jpeg2_p: float = 0.1
    jpeg2_quality: tuple = (40, 100)

    def __post_init__(self):
        for name in ("hflip_p", "rot90_p", "blur_p", "noise_p", "jitter_p",
                     "jpeg_p", "jpeg2_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if abs(sum(self.branch_probs) - 1.0) > 1e-9:
            raise ValueError("one-of branch probabilities must sum to 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPolicy":
        raw = json.loads(text)
        tuple_fields = {"branch_probs", "rrc_scale", "upscale_factors", "blur_kernels",
                        "noise_sigma", "jitter_factor", "jpeg_quality", "jpeg2_quality"}
        return cls(**{k: tuple(v) if k in tuple_fields else v for k, v in raw.items()})


def save_policy(policy: AugmentationPolicy, path) -> None:
    with open(path, "w") as f:
        f.write(policy.to_json())


def load_policy(path) -> AugmentationPolicy:
    with open(path) as f:
        return AugmentationPolicy.from_json(f.read())


@dataclass
class AugPlan:
    """All random decisions of one augmentation draw, fixed before execution."""

    hflip: bool
    quarter_turns: int
    branch: int
    rrc_area: float = 1.0
    crop_uv: tuple = (0.5, 0.5)  # fractional position of the crop origin
    upscale_factor: float = 2.0
    blur_kernel: int = 0  # 0 = off
    noise_sigma: float = 0.0
    jitter: tuple = ()  # (brightness, contrast, saturation, hue) or empty
    jpeg_quality: int = 0
    jpeg2_quality: int = 0
    noise_seed: int = 0


def draw_plan(policy: AugmentationPolicy, rng: np.random.Generator) -> AugPlan:
    """Sample every stochastic decision; cheap enough to Monte-Carlo test."""
    hflip = rng.random() < policy.hflip_p
    quarter_turns = int(rng.integers(0, 4)) if rng.random() < policy.rot90_p else 0
    branch = int(rng.choice(len(policy.branch_probs), p=policy.branch_probs))
    plan = AugPlan(
        hflip=hflip,
        quarter_turns=quarter_turns,
        branch=branch,
        rrc_area=float(rng.uniform(*policy.rrc_scale)),
        crop_uv=(float(rng.random()), float(rng.random())),
        upscale_factor=float(rng.choice(policy.upscale_factors)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )
    if rng.random() < policy.blur_p:
        plan.blur_kernel = int(rng.choice(policy.blur_kernels))
    if rng.random() < policy.noise_p:
        plan.noise_sigma = float(rng.uniform(*policy.noise_sigma))
    if rng.random() < policy.jitter_p:
        lo, hi = policy.jitter_factor
        plan.jitter = (
            float(rng.uniform(lo, hi)),
            float(rng.uniform(lo, hi)),
            float(rng.uniform(lo, hi)),
            float(rng.uniform(-policy.jitter_hue, policy.jitter_hue)),
        )
    if rng.random() < policy.jpeg_p:
        lo, hi = policy.jpeg_quality
        plan.jpeg_quality = int(rng.integers(lo, hi + 1))
        if rng.random() < policy.jpeg2_p:
            lo2, hi2 = policy.jpeg2_quality
            plan.jpeg2_quality = int(rng.integers(lo2, hi2 + 1))
    return plan


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(spread, 1e-12)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], axis=-1), np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1), np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1), np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, choice in enumerate(choices):
        out = np.where((i == k)[..., None], choice, out)
    return out


def _color_jitter(arr: np.ndarray, brightness, contrast, saturation, hue) -> np.ndarray:
    out = arr.astype(np.float64) * brightness
    mean = out.mean()
    out = mean + (out - mean) * contrast
    if arr.shape[2] == 3:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = gray[:, :, None] + (out - gray[:, :, None]) * saturation
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = _hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def _lanczos_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.clip(resample_array(arr, h, w, "lanczos"), 0.0, 1.0)


def execute_plan(img: ImagePlane, gt: BinaryMask, plan: AugPlan,
                 policy: AugmentationPolicy) -> tuple[ImagePlane, BinaryMask]:
    """Apply a drawn plan; geometric stages hit image and mask identically."""
    size = policy.out_size
    arr = np.asarray(img.data)
    mask = np.asarray(gt.data)

    if plan.hflip:
        arr = arr[:, ::-1]
        mask = mask[:, ::-1]
    if plan.quarter_turns:
        arr = np.rot90(arr, k=plan.quarter_turns, axes=(0, 1))
        mask = np.rot90(mask, k=plan.quarter_turns, axes=(0, 1))

    h, w = arr.shape[:2]
    branch = plan.branch
    if branch == 1 and (h < size or w < size):
        logger.info("random-crop branch impossible for %dx%d source, using resize", h, w)
        branch = 2
    if branch == 3:
        f = plan.upscale_factor
        nh, nw = round(h * f), round(w * f)
        if nh < size or nw < size:
            logger.info("upscale-crop branch too small for %dx%d source, using resize", h, w)
            branch = 2

    def crop_at(a, m, ch, cw):
        top = round(plan.crop_uv[0] * (a.shape[0] - ch))
        left = round(plan.crop_uv[1] * (a.shape[1] - cw))
        return (a[top : top + ch, left : left + cw], m[top : top + ch, left : left + cw])

    if branch == 0:
        # square crop of the drawn area fraction, then resize to out_size
        side = int(np.sqrt(plan.rrc_area * h * w))
        side = max(1, min(side, h, w))
        arr, mask = crop_at(arr, mask, side, side)
        arr = _lanczos_to(arr, size, size)
        mask = resample_array(mask.astype(np.uint8), size, size, "nearest").astype(bool)
    elif branch == 1:
        arr, mask = crop_at(arr, mask, size, size)
    elif branch == 2:
        arr = _lanczos_to(arr, size, size)
        mask = resample_array(mask.astype(np.uint8), size, size, "nearest").astype(bool)
    else:
        f = plan.upscale_factor
        nh, nw = round(h * f), round(w * f)
        arr = _lanczos_to(arr, nh, nw)
        mask = resample_array(mask.astype(np.uint8), nh, nw, "nearest").astype(bool)
        arr, mask = crop_at(arr, mask, size, size)

    arr = np.ascontiguousarray(arr, dtype=np.float32)
    mask = np.ascontiguousarray(mask)

    if plan.blur_kernel:
        arr = ndimage.uniform_filter(
            arr, size=(plan.blur_kernel, plan.blur_kernel, 1), mode="mirror"
        )
        arr = np.clip(arr, 0.0, 1.0)
    if plan.noise_sigma > 0:
        rng = np.random.default_rng(plan.noise_seed)
        arr = np.clip(arr + rng.normal(0.0, plan.noise_sigma / 255.0, arr.shape), 0.0, 1.0)
        arr = arr.astype(np.float32)
    if plan.jitter:
        arr = _color_jitter(arr, *plan.jitter).astype(np.float32)

    out = ImagePlane(arr)
    if plan.jpeg_quality:
        out = jpeg_round_trip(out, plan.jpeg_quality)
        if plan.jpeg2_quality:
            out = jpeg_round_trip(out, plan.jpeg2_quality)
    return out, BinaryMask(mask)


def augment(img: ImagePlane, gt: BinaryMask, policy: AugmentationPolicy,
            seed: int) -> tuple[ImagePlane, BinaryMask]:
    """One seeded augmentation draw; same seed gives bitwise-identical output."""
    if (img.height, img.width) != (gt.height, gt.width):
        raise ValueError("image and mask dims must match")
    rng = np.random.default_rng(seed)
    plan = draw_plan(policy, rng)
    return execute_plan(img, gt, plan, policy)
