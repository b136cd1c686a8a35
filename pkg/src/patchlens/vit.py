"""Vision-Transformer forward pass over fixed-size windows.

Produces per-patch embeddings (plus CLS and register tokens) from a square
window. The token layout is ``[cls; registers; patches]`` with positional
encodings added to patch tokens only, pre-norm residual blocks, exact-erf
GELU, and optionally the last layer's softmaxed attention weights. All
arithmetic is float32 with a fixed reduction order, so repeated calls on the
same input are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .container import read_container, write_container
from .errors import ShapeError, UnsupportedOperationError
from .planes import ImagePlane, PatchGridGeometry

_LN_EPS = 1.0e-6


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 14
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    registers: int = 4
    window: int = 504
    channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.window % self.patch_size != 0:
            raise ValueError("window must be divisible by patch_size")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid_side(self) -> int:
        return self.window // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def geometry(self) -> PatchGridGeometry:
        return PatchGridGeometry(self.patch_size, self.grid_side, self.grid_side)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "registers": self.registers,
            "window": self.window,
            "channels": self.channels,
            "mlp_ratio": self.mlp_ratio,
        }


def vit_b14_registers() -> ViTConfig:
    """The reference backbone shape: ViT-B, 14px patches, 4 registers, 504px window."""
    return ViTConfig()


@dataclass
class BlockWeights:
    """One pre-norm transformer block. Matrices are in `x @ W` orientation
    except where noted; q/k/v projections are (D, D) with heads stacked."""

    ln1_scale: np.ndarray
    ln1_offset: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (h * d_k, D)
    bo: np.ndarray
    ln2_scale: np.ndarray
    ln2_offset: np.ndarray
    mlp_w1: np.ndarray  # (D, hidden)
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray  # (hidden, D)
    mlp_b2: np.ndarray


@dataclass
class ViTWeights:
    patch_proj_w: np.ndarray  # (D, p*p*C), applied as x @ W.T
    patch_proj_b: np.ndarray  # (D,)
    pos_embed: np.ndarray  # (N, D), patch tokens only
    cls_token: np.ndarray  # (D,)
    register_tokens: np.ndarray  # (r, D)
    blocks: list[BlockWeights] = field(default_factory=list)
    final_norm_scale: np.ndarray | None = None
    final_norm_offset: np.ndarray | None = None
    image_classifier_w: np.ndarray | None = None  # (K, D), applied as W @ cls
    image_classifier_b: np.ndarray | None = None  # (K,)


@dataclass
class EmbeddingGrid:
    """Final-layer tokens of one window, split by role."""

    geometry: PatchGridGeometry
    cls: np.ndarray  # (D,)
    registers: np.ndarray  # (r, D)
    patches: np.ndarray  # (N, D), row-major, top-left patch first
    attentions_last: np.ndarray | None = None  # (h, T, T) softmax weights

    def __post_init__(self):
        if self.patches.shape[0] != self.geometry.num_patches:
            raise ShapeError(
                f"grid holds {self.patches.shape[0]} patches, geometry expects "
                f"{self.geometry.num_patches}"
            )
        if self.attentions_last is not None:
            rows = self.attentions_last.sum(axis=-1)
            if not np.allclose(rows, 1.0, atol=1e-5):
                raise ShapeError("attention rows must sum to 1 within 1e-5")

    @property
    def embed_dim(self) -> int:
        return self.patches.shape[1]


# ---------------------------------------------------------------------------
# Weight construction and validation


def random_weights(cfg: ViTConfig, seed: int = 0, classifier_classes: int | None = None,
                   final_norm: bool = False) -> ViTWeights:
    """Small random weights for tests and self-contained fixtures."""
    rng = np.random.default_rng(seed)
    d, n = cfg.embed_dim, cfg.num_patches
    pvec = cfg.patch_size * cfg.patch_size * cfg.channels
    hidden = cfg.mlp_ratio * d

    def mat(*shape, scale=None):
        scale = scale if scale is not None else (1.0 / np.sqrt(shape[-1]))
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    blocks = []
    for _ in range(cfg.depth):
        blocks.append(
            BlockWeights(
                ln1_scale=np.ones(d, dtype=np.float32),
                ln1_offset=np.zeros(d, dtype=np.float32),
                wq=mat(d, d), bq=mat(d, scale=0.01),
                wk=mat(d, d), bk=mat(d, scale=0.01),
                wv=mat(d, d), bv=mat(d, scale=0.01),
                wo=mat(d, d), bo=mat(d, scale=0.01),
                ln2_scale=np.ones(d, dtype=np.float32),
                ln2_offset=np.zeros(d, dtype=np.float32),
                mlp_w1=mat(d, hidden), mlp_b1=mat(hidden, scale=0.01),
                mlp_w2=mat(hidden, d), mlp_b2=mat(d, scale=0.01),
            )
        )
    weights = ViTWeights(
        patch_proj_w=mat(d, pvec),
        patch_proj_b=mat(d, scale=0.01),
        pos_embed=mat(n, d, scale=0.02),
        cls_token=mat(d, scale=0.02),
        register_tokens=mat(cfg.registers, d, scale=0.02) if cfg.registers else
        np.zeros((0, d), dtype=np.float32),
        blocks=blocks,
    )
    if final_norm:
        weights.final_norm_scale = np.ones(d, dtype=np.float32)
        weights.final_norm_offset = np.zeros(d, dtype=np.float32)
    if classifier_classes:
        weights.image_classifier_w = mat(classifier_classes, d)
        weights.image_classifier_b = np.zeros(classifier_classes, dtype=np.float32)
    return weights


def _expected_shapes(cfg: ViTConfig) -> dict:
    d, n, r = cfg.embed_dim, cfg.num_patches, cfg.registers
    pvec = cfg.patch_size * cfg.patch_size * cfg.channels
    hidden = cfg.mlp_ratio * d
    shapes = {
        "patch_proj_w": (d, pvec),
        "patch_proj_b": (d,),
        "pos_embed": (n, d),
        "cls_token": (d,),
        "register_tokens": (r, d),
    }
    per_block = {
        "ln1_scale": (d,), "ln1_offset": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln2_scale": (d,), "ln2_offset": (d,),
        "mlp_w1": (d, hidden), "mlp_b1": (hidden,),
        "mlp_w2": (hidden, d), "mlp_b2": (d,),
    }
    for i in range(cfg.depth):
        for name, shape in per_block.items():
            shapes[f"block{i}/{name}"] = shape
    return shapes


def validate_weights(cfg: ViTConfig, w: ViTWeights) -> None:
    """Raise ShapeError naming the first tensor whose shape disagrees with cfg."""
    if len(w.blocks) != cfg.depth:
        raise ShapeError(f"weights hold {len(w.blocks)} blocks, config depth is {cfg.depth}")
    expected = _expected_shapes(cfg)
    for name, shape in expected.items():
        if name.startswith("block"):
            idx, pname = name.split("/")
            arr = getattr(w.blocks[int(idx[5:])], pname)
        else:
            arr = getattr(w, name)
        if tuple(arr.shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
    d = cfg.embed_dim
    if (w.final_norm_scale is None) != (w.final_norm_offset is None):
        raise ShapeError("final_norm scale and offset must both be present or absent")
    if w.final_norm_scale is not None and w.final_norm_scale.shape != (d,):
        raise ShapeError(f"tensor 'final_norm_scale' has shape {w.final_norm_scale.shape}, expected {(d,)}")
    if (w.image_classifier_w is None) != (w.image_classifier_b is None):
        raise ShapeError("image classifier weight and bias must both be present or absent")
    if w.image_classifier_w is not None and w.image_classifier_w.shape[1] != d:
        raise ShapeError(
            f"tensor 'image_classifier_w' has {w.image_classifier_w.shape[1]} columns, expected {d}"
        )


# ---------------------------------------------------------------------------
# Forward pass


def patchify(img: ImagePlane, patch_size: int) -> np.ndarray:
    """Split into non-overlapping patches, flattened (row, col, channel).

    Returns (N, p*p*C) in row-major patch order, top-left patch first.
    """
    h, w, c = img.data.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"image dims {(h, w)} not divisible by patch size {p}")
    grid = img.data.reshape(h // p, p, w // p, p, c)
    return np.ascontiguousarray(grid.transpose(0, 2, 1, 3, 4)).reshape(-1, p * p * c)


def _layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * scale + offset


def gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(z: np.ndarray, blk: BlockWeights, heads: int, keep_probs: bool):
    t, d = z.shape
    dk = d // heads
    q = (z @ blk.wq + blk.bq).reshape(t, heads, dk).transpose(1, 0, 2)
    k = (z @ blk.wk + blk.bk).reshape(t, heads, dk).transpose(1, 0, 2)
    v = (z @ blk.wv + blk.bv).reshape(t, heads, dk).transpose(1, 0, 2)
    probs = _softmax((q @ k.transpose(0, 2, 1) / np.sqrt(dk)).astype(np.float32))
    ctx = (probs @ v).transpose(1, 0, 2).reshape(t, d)
    out = ctx @ blk.wo + blk.bo
    return out.astype(np.float32), (probs if keep_probs else None)


def forward(img: ImagePlane, cfg: ViTConfig, w: ViTWeights,
            want_attention: bool = False) -> EmbeddingGrid:
    """Embed one window. `img` must be exactly cfg.window on both sides."""
    if (img.height, img.width) != (cfg.window, cfg.window):
        raise ValueError(
            f"window must be {cfg.window}x{cfg.window}, got {img.height}x{img.width}"
        )
    if img.channels != cfg.channels:
        raise ValueError(f"window has {img.channels} channels, config expects {cfg.channels}")
    validate_weights(cfg, w)

    patches = patchify(img, cfg.patch_size).astype(np.float32)
    z_patch = patches @ w.patch_proj_w.T + w.patch_proj_b + w.pos_embed
    tokens = np.concatenate(
        [w.cls_token[None, :], w.register_tokens, z_patch.astype(np.float32)], axis=0
    )

    attn_last = None
    for i, blk in enumerate(w.blocks):
        keep = want_attention and i == len(w.blocks) - 1
        attn_out, probs = _attention(
            _layer_norm(tokens, blk.ln1_scale, blk.ln1_offset), blk, cfg.heads, keep
        )
        tokens = tokens + attn_out
        mlp_out = gelu(_layer_norm(tokens, blk.ln2_scale, blk.ln2_offset) @ blk.mlp_w1
                       + blk.mlp_b1) @ blk.mlp_w2 + blk.mlp_b2
        tokens = tokens + mlp_out.astype(np.float32)
        if keep:
            attn_last = probs

    if w.final_norm_scale is not None:
        tokens = _layer_norm(tokens, w.final_norm_scale, w.final_norm_offset)

    r = cfg.registers
    return EmbeddingGrid(
        geometry=cfg.geometry,
        cls=tokens[0],
        registers=tokens[1 : 1 + r],
        patches=tokens[1 + r :],
        attentions_last=attn_last,
    )


def classify_image(grid: EmbeddingGrid, w: ViTWeights) -> np.ndarray:
    """Class probabilities from the CLS token; softmax over classifier logits."""
    if w.image_classifier_w is None or w.image_classifier_b is None:
        raise UnsupportedOperationError("weights carry no image-level classifier")
    logits = w.image_classifier_w @ grid.cls + w.image_classifier_b
    return _softmax(logits[None, :])[0]


# ---------------------------------------------------------------------------
# Weight interchange


def save_weights(cfg: ViTConfig, w: ViTWeights, path, meta: dict | None = None) -> None:
    validate_weights(cfg, w)
    tensors: dict[str, np.ndarray] = {
        "patch_proj_w": w.patch_proj_w,
        "patch_proj_b": w.patch_proj_b,
        "pos_embed": w.pos_embed,
        "cls_token": w.cls_token,
        "register_tokens": w.register_tokens,
    }
    for i, blk in enumerate(w.blocks):
        for name in BlockWeights.__dataclass_fields__:
            tensors[f"block{i}/{name}"] = getattr(blk, name)
    if w.final_norm_scale is not None:
        tensors["final_norm_scale"] = w.final_norm_scale
        tensors["final_norm_offset"] = w.final_norm_offset
    if w.image_classifier_w is not None:
        tensors["image_classifier_w"] = w.image_classifier_w
        tensors["image_classifier_b"] = w.image_classifier_b
    full_meta = {"config": cfg.to_dict()}
    full_meta.update(meta or {})
    write_container(path, tensors, kind="vit-weights", meta=full_meta)


def load_weights(path) -> tuple[ViTConfig, ViTWeights]:
    c = read_container(path)
    if c.kind != "vit-weights":
        raise ShapeError(f"container kind {c.kind!r} is not 'vit-weights'")
    cfg = ViTConfig(**c.meta["config"])
    blocks = []
    for i in range(cfg.depth):
        fields = {}
        for name in BlockWeights.__dataclass_fields__:
            key = f"block{i}/{name}"
            if key not in c:
                raise ShapeError(f"weight file missing tensor {key!r}")
            fields[name] = np.array(c.tensor(key))
        blocks.append(BlockWeights(**fields))
    w = ViTWeights(
        patch_proj_w=np.array(c.tensor("patch_proj_w")),
        patch_proj_b=np.array(c.tensor("patch_proj_b")),
        pos_embed=np.array(c.tensor("pos_embed")),
        cls_token=np.array(c.tensor("cls_token")),
        register_tokens=np.array(c.tensor("register_tokens")),
        blocks=blocks,
        final_norm_scale=np.array(c.tensor("final_norm_scale")) if "final_norm_scale" in c else None,
        final_norm_offset=np.array(c.tensor("final_norm_offset")) if "final_norm_offset" in c else None,
        image_classifier_w=np.array(c.tensor("image_classifier_w")) if "image_classifier_w" in c else None,
        image_classifier_b=np.array(c.tensor("image_classifier_b")) if "image_classifier_b" in c else None,
    )
    validate_weights(cfg, w)
    return cfg, w
