"""Head-only optimization: Dice loss over augmented crops with a frozen backbone.

The backbone never receives gradients; only the head parameters move. Training
runs in float64 for well-conditioned gradients and materializes float32 heads
for inference and checkpoints. Per image the loss is Dice over the window's
pixels (patch probabilities block-replicated to pixel resolution), averaged
over the batch. The optimizer is Adam with decoupled weight decay; the
learning rate halves after `patience` epochs without validation improvement
and training stops once it falls below `stop_lr`.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backends import EmbeddingBackend
from .container import read_container, write_container
from .errors import FormatError, ShapeError, UnsupportedOperationError
from .heads import (
    AttentionHead,
    Head,
    LinearHead,
    MlpHead,
    dice_grad,
    dice_loss,
    sigmoid,
)
from .perturb import AugmentationPolicy, jpeg_round_trip
from .planes import BinaryMask, ImagePlane, crop, crop_mask, resize, resize_mask
from .vit import EmbeddingGrid, gelu

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 64
    lr0: float = 1.0e-3
    patience: int = 4  # epochs without val improvement before halving
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1.0e-8
    weight_decay: float = 1.0e-5
    max_epochs: int = 100
    stop_lr: float = 1.0e-6
    seed: int = 0
    steps_per_epoch: int | None = None  # default: ceil(n_train / batch)
    max_steps: int | None = None  # hard cap, mainly for synthetic runs
    images_per_epoch: int | None = None  # subsample large epochs
    val_jpeg_p: float = 0.5
    val_jpeg_quality: tuple = (40, 100)

    def __post_init__(self):
        if self.batch < 1 or self.lr0 <= 0 or self.patience < 1:
            raise ValueError("batch, lr0, and patience must be positive")


@dataclass
class ArrayExample:
    """In-memory training example."""

    image: ImagePlane
    mask: BinaryMask

    def load(self) -> tuple[ImagePlane, BinaryMask]:
        return self.image, self.mask


@dataclass
class SampleExample:
    """Lazy example backed by a dataset sample and a label policy."""

    sample: object
    policy: object

    def load(self):
        from .dataset import effective_mask

        return self.sample.load_image(), effective_mask(self.sample, self.policy)


# ---------------------------------------------------------------------------
# Differentiable head forwards (float64)


@dataclass
class HeadParams:
    kind: str  # linear | mlp | attn-w
    values: dict[str, np.ndarray]

    @classmethod
    def init(cls, kind: str, dim: int, attn_heads: int = 12, seed: int = 0) -> "HeadParams":
        rng = np.random.default_rng(seed)
        if kind == "linear":
            return cls(kind, {"w": np.zeros(dim), "b": np.zeros(1)})
        if kind == "mlp":
            # w1 random so the zero-initialized output layer still gets signal
            return cls(kind, {
                "w1": rng.standard_normal((dim, dim)) / math.sqrt(dim),
                "b1": np.zeros(dim),
                "w2": np.zeros(dim),
                "b2": np.zeros(1),
            })
        if kind == "attn-w":
            return cls(kind, {"w": np.full(attn_heads, 1.0 / attn_heads)})
        raise ValueError(f"unknown trainable head kind {kind!r}")

    def clone(self) -> "HeadParams":
        return HeadParams(self.kind, {k: v.copy() for k, v in self.values.items()})

    def to_head(self) -> Head:
        v = self.values
        if self.kind == "linear":
            return LinearHead(v["w"].astype(np.float32), float(v["b"][0]))
        if self.kind == "mlp":
            return MlpHead(v["w1"].astype(np.float32), v["b1"].astype(np.float32),
                           v["w2"].astype(np.float32), float(v["b2"][0]))
        return AttentionHead("weighted", v["w"].astype(np.float32))


def _gelu_prime(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


def _attention_matrix(grid: EmbeddingGrid) -> np.ndarray:
    if grid.attentions_last is None:
        raise UnsupportedOperationError("attention-head training needs attention outputs")
    first_patch = 1 + grid.registers.shape[0]
    return grid.attentions_last[:, 0, first_patch:].T.astype(np.float64)  # (N, h)


def forward_probs(params: HeadParams, grid: EmbeddingGrid):
    """Per-patch probability vector plus the cache the backward pass needs."""
    v = params.values
    if params.kind == "linear":
        z = grid.patches.astype(np.float64)
        logits = z @ v["w"] + v["b"][0]
        probs = sigmoid(logits)
        return probs, {"z": z, "probs": probs}
    if params.kind == "mlp":
        z = grid.patches.astype(np.float64)
        u = z @ v["w1"] + v["b1"]
        a = gelu(u)
        logits = a @ v["w2"] + v["b2"][0]
        probs = sigmoid(logits)
        return probs, {"z": z, "u": u, "a": a, "probs": probs}
    attn = _attention_matrix(grid)
    scores = attn @ v["w"]
    lo_i, hi_i = int(np.argmin(scores)), int(np.argmax(scores))
    spread = scores[hi_i] - scores[lo_i]
    if spread <= 0:
        probs = np.full(scores.shape, 0.5)
    else:
        probs = (scores - scores[lo_i]) / spread
    return probs, {"attn": attn, "scores": scores, "lo": lo_i, "hi": hi_i,
                   "spread": spread, "probs": probs}


def backward_params(params: HeadParams, cache: dict, grad_probs: np.ndarray) -> dict:
    """Parameter gradients given dL/dp per patch."""
    v = params.values
    if params.kind in ("linear", "mlp"):
        probs = cache["probs"]
        grad_logits = grad_probs * probs * (1.0 - probs)
        if params.kind == "linear":
            return {"w": cache["z"].T @ grad_logits,
                    "b": np.array([grad_logits.sum()])}
        ga = np.outer(grad_logits, v["w2"])
        gu = ga * _gelu_prime(cache["u"])
        return {
            "w1": cache["z"].T @ gu,
            "b1": gu.sum(axis=0),
            "w2": cache["a"].T @ grad_logits,
            "b2": np.array([grad_logits.sum()]),
        }
    # min-max scaled attention scores; extremes treated as locally fixed
    spread = cache["spread"]
    if spread <= 0:
        return {"w": np.zeros_like(v["w"])}
    probs = cache["probs"]
    g_scores = grad_probs / spread
    g_scores = g_scores.copy()
    g_scores[cache["lo"]] += float(np.sum(grad_probs * (probs - 1.0))) / spread
    g_scores[cache["hi"]] += float(np.sum(grad_probs * (-probs))) / spread
    return {"w": cache["attn"].T @ g_scores}


def _pixel_mask(mask: BinaryMask) -> np.ndarray:
    return mask.data.astype(np.float64).reshape(-1)


def batch_loss_and_grads(params: HeadParams, batch: list[tuple[EmbeddingGrid, BinaryMask]]):
    """Mean per-image Dice loss over the batch, its parameter gradients, and
    the batch IoU of thresholded predictions."""
    total_loss = 0.0
    grads: dict[str, np.ndarray] = {k: np.zeros_like(val) for k, val in params.values.items()}
    ious = []
    scale = 1.0 / len(batch)
    for grid, mask in batch:
        g = grid.geometry
        if (mask.height, mask.width) != (g.window, g.window):
            raise ShapeError("mask dims must equal the embedding window")
        probs, cache = forward_probs(params, grid)
        p = g.patch_size
        probs_plane = probs.reshape(g.grid_h, g.grid_w)
        probs_pixel = np.repeat(np.repeat(probs_plane, p, axis=0), p, axis=1).reshape(-1)
        target = _pixel_mask(mask)
        total_loss += dice_loss(probs_pixel, target) * scale
        grad_pixel = dice_grad(probs_pixel, target) * scale
        grad_patch = grad_pixel.reshape(g.grid_h, p, g.grid_w, p).sum(axis=(1, 3)).reshape(-1)
        for key, val in backward_params(params, cache, grad_patch).items():
            grads[key] += val
        pred = probs_pixel > 0.5
        gt = target > 0.5
        union = np.logical_or(pred, gt).sum()
        ious.append(1.0 if union == 0 else np.logical_and(pred, gt).sum() / union)
    return total_loss, grads, float(np.mean(ious))


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, values: dict, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / (1.0 - self.beta1**self.t)
            vhat = self.v[key] / (1.0 - self.beta2**self.t)
            values[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            values[key] -= self.lr * self.weight_decay * values[key]


# ---------------------------------------------------------------------------
# Embedding cache


class EmbeddingCache:
    """Content-addressed store of embedding grids keyed by (image hash, crop rect)."""

    def __init__(self, root, backend: EmbeddingBackend):
        from pathlib import Path

        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.backend = backend

    @staticmethod
    def key_for(image: ImagePlane, rect: tuple[int, int, int, int]) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.asarray(image.data.shape, dtype="<u4").tobytes())
        h.update(image.data.astype("<f4").tobytes())
        h.update(np.asarray(rect, dtype="<i8").tobytes())
        return h.hexdigest()

    def _path(self, key: str):
        return self.root / f"{key}.vitc"

    def get(self, image: ImagePlane, rect: tuple[int, int, int, int],
            want_attention: bool = False) -> EmbeddingGrid:
        key = self.key_for(image, rect)
        path = self._path(key)
        if path.exists():
            try:
                from .planes import PatchGridGeometry

                c = read_container(path)
                if want_attention and "attn" not in c:
                    raise FormatError("cached entry lacks attention")
                return EmbeddingGrid(
                    geometry=PatchGridGeometry(*c.meta["geometry"]),
                    cls=np.array(c.tensor("cls")),
                    registers=np.array(c.tensor("registers")),
                    patches=np.array(c.tensor("patches")),
                    attentions_last=np.array(c.tensor("attn")) if want_attention else None,
                )
            except Exception as e:  # corrupt entry: recompute and overwrite
                logger.warning("cache entry %s unreadable (%s); recomputing", key, e)
        top, left, h, w = rect
        grid = self.backend.embed(crop(image, top, left, h, w), want_attention=want_attention)
        tensors = {"patches": grid.patches, "cls": grid.cls, "registers": grid.registers}
        if grid.attentions_last is not None:
            tensors["attn"] = grid.attentions_last
        write_container(self._path(key), tensors, kind="embedding-cache",
                        meta={"geometry": [grid.geometry.patch_size,
                                           grid.geometry.grid_h, grid.geometry.grid_w]})
        return grid


def cache_embeddings(examples, backend: EmbeddingBackend, store_path,
                     want_attention: bool = False) -> EmbeddingCache:
    """Precompute center-crop embeddings for every example; returns the cache."""
    cache = EmbeddingCache(store_path, backend)
    window = backend.window
    for ex in examples:
        image, _ = ex.load()
        image = _fit_min_side(image, window)
        rect = _center_rect(image, window)
        cache.get(image, rect, want_attention=want_attention)
    return cache


def _fit_min_side(image: ImagePlane, target: int) -> ImagePlane:
    if min(image.height, image.width) >= target:
        return image
    scale = target / min(image.height, image.width)
    return resize(image, max(target, math.ceil(image.height * scale)),
                  max(target, math.ceil(image.width * scale)), "lanczos")


def _center_rect(image: ImagePlane, window: int) -> tuple[int, int, int, int]:
    return ((image.height - window) // 2, (image.width - window) // 2, window, window)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class PlateauHalving:
    """Halve the learning rate after `patience` epochs without improvement."""

    lr: float
    patience: int
    best: float = math.inf
    since_improve: int = 0

    def update(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; returns True when this is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_improve = 0
            return True
        self.since_improve += 1
        if self.since_improve >= self.patience:
            self.lr *= 0.5
            self.since_improve = 0
        return False


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_iou: float
    wall_time: float


@dataclass
class StepRecord:
    step: int
    loss: float
    batch_iou: float


@dataclass
class TrainResult:
    head: Head
    params: HeadParams
    history: list[EpochRecord]
    steps: list[StepRecord]
    aborted: bool = False
    best_val_loss: float = math.inf


def history_bytes(history: list[EpochRecord]) -> bytes:
    """Canonical byte form of the deterministic history fields (no wall time)."""
    lines = [
        f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r},{r.val_iou!r}"
        for r in history
    ]
    return "\n".join(lines).encode()


def history_jsonl(history: list[EpochRecord]) -> str:
    import json

    return "\n".join(
        json.dumps({
            "epoch": r.epoch, "lr": r.lr, "train_loss": r.train_loss,
            "val_loss": r.val_loss, "val_iou": r.val_iou, "wall_time": r.wall_time,
        }, sort_keys=True)
        for r in history
    ) + "\n"


def _masked_iou(probs_pixel: np.ndarray, target: np.ndarray) -> float:
    pred = probs_pixel > 0.5
    gt = target > 0.5
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


def _val_example_pass(params: HeadParams, backend, image, mask, window,
                      jpeg_quality: int, cache: EmbeddingCache | None,
                      want_attention: bool):
    image = _fit_min_side(image, window)
    if (mask.height, mask.width) != (image.height, image.width):
        mask = resize_mask(mask, image.height, image.width)
    rect = _center_rect(image, window)
    top, left, h, w = rect
    mask_crop = crop_mask(mask, top, left, h, w)
    if jpeg_quality:
        window_img = jpeg_round_trip(crop(image, top, left, h, w), jpeg_quality)
        grid = backend.embed(window_img, want_attention=want_attention)
    elif cache is not None:
        grid = cache.get(image, rect, want_attention=want_attention)
    else:
        grid = backend.embed(crop(image, top, left, h, w), want_attention=want_attention)
    probs, _ = forward_probs(params, grid)
    g = grid.geometry
    probs_pixel = np.repeat(np.repeat(probs.reshape(g.grid_h, g.grid_w), g.patch_size, 0),
                            g.patch_size, 1).reshape(-1)
    target = _pixel_mask(mask_crop)
    return dice_loss(probs_pixel, target), _masked_iou(probs_pixel, target)


def train_head(variant: str, backend: EmbeddingBackend, train_examples, val_examples,
               cfg: TrainConfig, policy: AugmentationPolicy,
               cache: EmbeddingCache | None = None,
               attn_heads: int = 12) -> TrainResult:
    """Optimize one head variant; returns the best-validation parameters."""
    from .perturb import augment

    if not train_examples:
        raise ValueError("training needs at least one example")
    window = backend.window
    if policy.out_size != window:
        raise ValueError(
            f"policy produces {policy.out_size}px crops but backend window is {window}px"
        )
    want_attention = variant == "attn-w"
    probe_img, _ = train_examples[0].load()
    dim = backend.embed(
        crop(_fit_min_side(probe_img, window), 0, 0, window, window)
    ).embed_dim
    params = HeadParams.init(variant, dim, attn_heads=attn_heads, seed=cfg.seed)
    optimizer = AdamW(lr=cfg.lr0, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    master = np.random.SeedSequence(cfg.seed)
    shuffle_rng = np.random.default_rng(master.spawn(1)[0])
    augment_rng = np.random.default_rng(master.spawn(1)[0])

    scheduler = PlateauHalving(lr=cfg.lr0, patience=cfg.patience)
    best_params = params.clone()
    history: list[EpochRecord] = []
    steps: list[StepRecord] = []
    total_steps = 0
    aborted = False

    for epoch in range(cfg.max_epochs):
        epoch_start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_examples))
        if cfg.images_per_epoch is not None:
            order = order[: cfg.images_per_epoch]
        n_steps = cfg.steps_per_epoch or max(1, math.ceil(len(order) / cfg.batch))
        epoch_losses = []
        for step in range(n_steps):
            if cfg.max_steps is not None and total_steps >= cfg.max_steps:
                break
            lo = (step * cfg.batch) % max(1, len(order))
            idx = [order[(lo + k) % len(order)] for k in range(min(cfg.batch, len(order)))]
            batch = []
            for i in idx:
                image, mask = train_examples[i].load()
                aug_img, aug_mask = augment(image, mask, policy,
                                            seed=int(augment_rng.integers(0, 2**31 - 1)))
                grid = backend.embed(aug_img, want_attention=want_attention)
                batch.append((grid, aug_mask))
            loss, grads, batch_iou = batch_loss_and_grads(params, batch)
            if not math.isfinite(loss):
                logger.error("non-finite loss at step %d; aborting with best checkpoint",
                             total_steps)
                aborted = True
                break
            optimizer.step(params.values, grads)
            total_steps += 1
            epoch_losses.append(loss)
            steps.append(StepRecord(total_steps, loss, batch_iou))
        if aborted:
            break
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan

        # validation: center crop + seeded JPEG with probability val_jpeg_p
        if val_examples:
            val_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7919, epoch])
            )
            val_losses, val_ious = [], []
            for ex in val_examples:
                image, mask = ex.load()
                quality = 0
                if val_rng.random() < cfg.val_jpeg_p:
                    lo_q, hi_q = cfg.val_jpeg_quality
                    quality = int(val_rng.integers(lo_q, hi_q + 1))
                loss, iou_val = _val_example_pass(
                    params, backend, image, mask, window, quality, cache, want_attention
                )
                val_losses.append(loss)
                val_ious.append(iou_val)
            val_loss = float(np.mean(val_losses))
            val_iou = float(np.mean(val_ious))
        else:
            val_loss = train_loss
            val_iou = steps[-1].batch_iou if steps else 0.0

        history.append(EpochRecord(epoch, optimizer.lr, train_loss, val_loss, val_iou,
                                   time.perf_counter() - epoch_start))

        if scheduler.update(val_loss):
            best_params = params.clone()
        optimizer.lr = scheduler.lr
        if optimizer.lr < cfg.stop_lr:
            break
        if cfg.max_steps is not None and total_steps >= cfg.max_steps:
            break

    if not history or (math.isinf(scheduler.best) and not aborted):
        best_params = params.clone()
    return TrainResult(head=best_params.to_head(), params=best_params, history=history,
                       steps=steps, aborted=aborted, best_val_loss=scheduler.best)


def train_attention_weights(backend: EmbeddingBackend, examples, cfg: TrainConfig,
                            policy: AugmentationPolicy, attn_heads: int = 12,
                            max_examples: int = 100) -> TrainResult:
    """Learn the per-head mixing weights; uses at most `max_examples` images."""
    if len(examples) > max_examples:
        rng = np.random.default_rng(cfg.seed)
        picked = rng.choice(len(examples), size=max_examples, replace=False)
        logger.info("subsampling %d of %d examples for attention-weight training",
                    max_examples, len(examples))
        examples = [examples[i] for i in picked]
    return train_head("attn-w", backend, examples, [], cfg, policy,
                      attn_heads=attn_heads)
