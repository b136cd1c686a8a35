"""Dataset ingestion, labeling conventions, and window-coverage statistics.

A manifest maps heterogeneous dataset layouts onto (image, mask, background
kind) triples without per-dataset loader code: each entry gives an image glob,
a mask substitution pattern, and a background-kind constant. Images without a
mask file are fully pristine. Splits are deterministic: ids are ordered by a
seeded hash and sliced 80/10/10.

The background kind states what happened to non-inpainted pixels. Under the
default label policy auto-encoded pixels count as pristine; the alternative
policy labels every pixel of an auto-encoded or regenerated background as
forged, which needs the background kind to be known.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnsupportedOperationError
from .planes import BinaryMask, ImagePlane, mirror_pad_mask, read_image, read_mask, resize_mask
from .tiler import WindowPlan, plan_windows

logger = logging.getLogger(__name__)

BACKGROUND_KINDS = ("original", "autoencoded", "regenerated", "unknown")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabelPolicy:
    autoencoded_is: str = "pristine"  # "pristine" | "fake"

    def __post_init__(self):
        if self.autoencoded_is not in ("pristine", "fake"):
            raise ValueError(f"autoencoded_is must be pristine|fake, got {self.autoencoded_is!r}")


@dataclass(frozen=True)
class Sample:
    image_path: Path
    mask_path: Path | None  # absent = fully pristine
    background: str
    dataset: str
    split: str
    image_id: str

    def load_image(self) -> ImagePlane:
        return read_image(self.image_path)

    def load_mask(self) -> BinaryMask:
        """Raw ground-truth mask; empty for pristine samples."""
        if self.mask_path is None:
            with Image.open(self.image_path) as im:
                w, h = im.size
            return BinaryMask.empty(h, w)
        return read_mask(self.mask_path)


def effective_mask(sample: Sample, policy: LabelPolicy) -> BinaryMask:
    """Ground truth under the chosen labeling of auto-encoded pixels."""
    base = sample.load_mask()
    if policy.autoencoded_is == "pristine":
        return base
    if sample.background == "original":
        return base
    if sample.background in ("autoencoded", "regenerated"):
        return BinaryMask(np.ones_like(base.data))
    raise UnsupportedOperationError(
        f"sample {sample.image_id!r} has unknown background extent; "
        "the fake-background policy needs background metadata"
    )


@dataclass
class IngestReport:
    samples: list[Sample]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)
    orphan_masks: list[str] = field(default_factory=list)

    def by_split(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]


def _split_sizes(n: int) -> tuple[int, int, int]:
    train = int(n * 0.8 + 0.5)
    val = int(n * 0.1 + 0.5)
    val = min(val, n - train)
    return train, val, n - train - val


def _assign_splits(ids: list[str], dataset: str, seed: int) -> dict[str, str]:
    def key(image_id: str) -> str:
        return hashlib.blake2b(
            f"{seed}:{dataset}:{image_id}".encode(), digest_size=16
        ).hexdigest()

    ordered = sorted(ids, key=key)
    n_train, n_val, _ = _split_sizes(len(ordered))
    assignment = {}
    for i, image_id in enumerate(ordered):
        if i < n_train:
            assignment[image_id] = "train"
        elif i < n_train + n_val:
            assignment[image_id] = "val"
        else:
            assignment[image_id] = "test"
    return assignment


def _mask_path_for(root: Path, pattern: str, image: Path) -> Path:
    rel = image.relative_to(root)
    return root / pattern.format(
        stem=image.stem, name=image.name, reldir=str(rel.parent)
    )


def _image_dims(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


def ingest(root, manifest) -> IngestReport:
    """Walk the manifest's datasets under `root` and build the sample list.

    `manifest` is a dict or a path to a JSON file with entries
    {"datasets": [{"name", "images", "masks", "background"}], "split_seed"}.
    """
    root = Path(root)
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    seed = int(manifest.get("split_seed", 0))
    report = IngestReport(samples=[])
    for entry in manifest["datasets"]:
        name = entry["name"]
        background = entry.get("background", "unknown")
        if background not in BACKGROUND_KINDS:
            raise ValueError(f"dataset {name!r} has invalid background kind {background!r}")
        images = sorted(root.glob(entry["images"]))
        mask_pattern = entry.get("masks")
        claimed_masks: set[Path] = set()
        pending: list[tuple[str, Path, Path | None]] = []
        for image in images:
            image_id = str(image.relative_to(root).with_suffix(""))
            mask_path = None
            if mask_pattern:
                candidate = _mask_path_for(root, mask_pattern, image)
                if candidate.exists():
                    try:
                        if _image_dims(candidate) != _image_dims(image):
                            report.skipped.append(
                                (str(image), "mask dims do not match image dims")
                            )
                            claimed_masks.add(candidate)
                            continue
                    except OSError as e:
                        report.skipped.append((str(image), f"unreadable mask: {e}"))
                        continue
                    mask_path = candidate
                    claimed_masks.add(candidate)
            pending.append((image_id, image, mask_path))
        if mask_pattern:
            static_dir = root / Path(mask_pattern.split("{")[0])
            if static_dir.is_dir():
                for orphan in sorted(static_dir.rglob("*.png")):
                    if orphan not in claimed_masks:
                        report.orphan_masks.append(str(orphan))
        assignment = _assign_splits([pid for pid, _, _ in pending], name, seed)
        for image_id, image, mask_path in pending:
            report.samples.append(
                Sample(
                    image_path=image,
                    mask_path=mask_path,
                    background=background,
                    dataset=name,
                    split=assignment[image_id],
                    image_id=image_id,
                )
            )
    if report.skipped:
        for path, reason in report.skipped:
            logger.warning("skipped %s: %s", path, reason)
    return report


# ---------------------------------------------------------------------------
# Window statistics


@dataclass
class WindowStats:
    per_image: dict[str, float]  # image id -> mean fraction over modified windows
    mean_window_fraction: float  # average of per_image values
    mean_mask_fraction: float  # average forged fraction per modified image, no upscaling
    histogram: list[tuple[float, int]]  # (bin_low, count) over per_image values
    window: int
    stride: int
    images_without_modified_windows: int = 0


def _prepare_stat_mask(mask: BinaryMask, plan: WindowPlan) -> np.ndarray:
    data = mask
    if (plan.scaled_h, plan.scaled_w) != (mask.height, mask.width):
        data = resize_mask(data, plan.scaled_h, plan.scaled_w)
    if plan.pad_right or plan.pad_bottom:
        data = mirror_pad_mask(data, plan.pad_right, plan.pad_bottom)
    return data.data


def window_fractions(mask: BinaryMask, window: int = 504, stride: int = 128,
                     min_size: int = 1016) -> np.ndarray:
    """Forged fraction of every modified window, after tiler-identical upscaling."""
    plan = plan_windows(mask.height, mask.width, window=window, stride=stride,
                        min_size=min_size)
    padded = _prepare_stat_mask(mask, plan)
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    tops = np.array(sorted({t for t, _ in plan.origins}))
    lefts = np.array(sorted({l for _, l in plan.origins}))
    t0, l0 = np.meshgrid(tops, lefts, indexing="ij")
    t1, l1 = t0 + window, l0 + window
    counts = (integral[t1, l1] - integral[t0, l1] - integral[t1, l0] + integral[t0, l0])
    fractions = counts.reshape(-1).astype(np.float64) / (window * window)
    return fractions[fractions > 0]


def window_stats(samples, window: int = 504, stride: int = 128, min_size: int = 1016,
                 bin_width: float = 0.02,
                 policy: LabelPolicy = LabelPolicy()) -> WindowStats:
    """Per-image mean modified-window fraction and its dataset aggregate."""
    per_image: dict[str, float] = {}
    mask_fractions = []
    empty = 0
    for sample in samples:
        mask = effective_mask(sample, policy)
        fractions = window_fractions(mask, window=window, stride=stride, min_size=min_size)
        if fractions.size == 0:
            empty += 1
            continue
        per_image[sample.image_id] = float(fractions.mean())
        mask_fractions.append(mask.forged_pixels() / mask.data.size)
    values = np.array(list(per_image.values()))
    edges = np.arange(0.0, 1.0 + bin_width, bin_width)
    hist, _ = np.histogram(values, bins=edges) if values.size else (np.zeros(len(edges) - 1, int), None)
    return WindowStats(
        per_image=per_image,
        mean_window_fraction=float(values.mean()) if values.size else 0.0,
        mean_mask_fraction=float(np.mean(mask_fractions)) if mask_fractions else 0.0,
        histogram=[(float(edges[i]), int(hist[i])) for i in range(len(hist))],
        window=window,
        stride=stride,
        images_without_modified_windows=empty,
    )
