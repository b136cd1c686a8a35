"""Patch-level decision heads and the overlap loss used to train them.

Four head variants map an EmbeddingGrid to one logit per patch: a linear
probe, a 2-layer MLP probe, and two heads reading the CLS row of the last
attention layer (uniform average over heads, or learned per-head weights).
Decisions threshold the logit at 0, equivalently probability 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedOperationError
from .planes import FloatPlane, PatchGridGeometry
from .vit import EmbeddingGrid, gelu
from .container import read_container, write_container

_PROB_CLAMP = 1.0e-6


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LinearHead:
    """One weight per embedding coordinate plus a bias: D+1 parameters."""

    w: np.ndarray
    b: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "LinearHead":
        return cls(np.zeros(dim, dtype=np.float32), 0.0)

    @classmethod
    def from_image_classifier(cls, classifier_w: np.ndarray, classifier_b: np.ndarray,
                              fake_index: int = 1) -> "LinearHead":
        """Log-odds reduction of a 2-class image classifier, reused per patch."""
        if classifier_w.shape[0] != 2:
            raise ShapeError("classifier reuse needs exactly 2 classes")
        real_index = 1 - fake_index
        w = classifier_w[fake_index] - classifier_w[real_index]
        b = float(classifier_b[fake_index] - classifier_b[real_index])
        return cls(w.astype(np.float32), b)


@dataclass
class MlpHead:
    """Two-layer probe with a hidden width equal to the embedding dim."""

    w1: np.ndarray  # (D, D), applied as z @ w1
    b1: np.ndarray  # (D,)
    w2: np.ndarray  # (D,)
    b2: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "MlpHead":
        return cls(
            np.zeros((dim, dim), dtype=np.float32),
            np.zeros(dim, dtype=np.float32),
            np.zeros(dim, dtype=np.float32),
            0.0,
        )


@dataclass
class AttentionHead:
    """Reads CLS-to-patch attention; no embedding parameters at all."""

    mode: str  # "average" | "weighted"
    weights: np.ndarray  # (h,)

    def __post_init__(self):
        if self.mode not in ("average", "weighted"):
            raise ValueError(f"unknown attention head mode {self.mode!r}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("attention head weights must be finite")

    @classmethod
    def average(cls, heads: int) -> "AttentionHead":
        return cls("average", np.full(heads, 1.0 / heads, dtype=np.float32))


Head = LinearHead | MlpHead | AttentionHead


@dataclass
class PatchLogitGrid:
    geometry: PatchGridGeometry
    logits: np.ndarray  # (N,) float32, pre-sigmoid, decision threshold 0

    def __post_init__(self):
        if self.logits.shape != (self.geometry.num_patches,):
            raise ShapeError(
                f"{self.logits.shape[0]} logits for {self.geometry.num_patches} patches"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits.astype(np.float64))


def linear_logits(grid: EmbeddingGrid, head: LinearHead) -> PatchLogitGrid:
    if grid.embed_dim != head.w.shape[0]:
        raise ShapeError(f"head dim {head.w.shape[0]} != embedding dim {grid.embed_dim}")
    logits = grid.patches @ head.w + head.b
    return PatchLogitGrid(grid.geometry, logits.astype(np.float32))


def mlp_logits(grid: EmbeddingGrid, head: MlpHead) -> PatchLogitGrid:
    if grid.embed_dim != head.w1.shape[0]:
        raise ShapeError(f"head dim {head.w1.shape[0]} != embedding dim {grid.embed_dim}")
    hidden = gelu(grid.patches @ head.w1 + head.b1)
    logits = hidden @ head.w2 + head.b2
    return PatchLogitGrid(grid.geometry, logits.astype(np.float32))


def attention_scores(grid: EmbeddingGrid, head: AttentionHead) -> np.ndarray:
    """Weighted CLS-to-patch attention before any rescaling; shape (N,)."""
    if grid.attentions_last is None:
        raise UnsupportedOperationError("grid was embedded without attention weights")
    n_heads = grid.attentions_last.shape[0]
    if head.weights.shape != (n_heads,):
        raise ShapeError(f"{head.weights.shape[0]} head weights for {n_heads} heads")
    first_patch = 1 + grid.registers.shape[0]  # 0 = CLS, then registers, then patches
    cls_rows = grid.attentions_last[:, 0, first_patch:]
    return head.weights @ cls_rows


def minmax_probabilities(scores: np.ndarray) -> np.ndarray:
    """Scale scores to [0, 1] over the window; a constant window maps to 0.5."""
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 0.0:
        return np.full_like(scores, 0.5, dtype=np.float64)
    return (scores.astype(np.float64) - lo) / (hi - lo)


def attention_logits(grid: EmbeddingGrid, head: AttentionHead) -> PatchLogitGrid:
    probs = np.clip(minmax_probabilities(attention_scores(grid, head)),
                    _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    logits = np.log(probs / (1.0 - probs))
    return PatchLogitGrid(grid.geometry, logits.astype(np.float32))


def patch_logits(grid: EmbeddingGrid, head: Head) -> PatchLogitGrid:
    """Dispatch to the head variant's forward."""
    if isinstance(head, LinearHead):
        return linear_logits(grid, head)
    if isinstance(head, MlpHead):
        return mlp_logits(grid, head)
    if isinstance(head, AttentionHead):
        return attention_logits(grid, head)
    raise TypeError(f"unknown head type {type(head).__name__}")


def needs_attention(head: Head) -> bool:
    return isinstance(head, AttentionHead)


def upsample_logits(grid: PatchLogitGrid) -> FloatPlane:
    """Block-replicate each patch logit to its p x p pixels."""
    g = grid.geometry
    plane = grid.logits.reshape(g.grid_h, g.grid_w)
    plane = np.repeat(np.repeat(plane, g.patch_size, axis=0), g.patch_size, axis=1)
    return FloatPlane(plane)


# ---------------------------------------------------------------------------
# Dice loss


def _dice_terms(p: np.ndarray, g: np.ndarray):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ShapeError(f"probability/label length mismatch: {p.shape} vs {g.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return p, g, float(p @ g), float(p @ p), float(g @ g)


def dice_loss(p: np.ndarray, g: np.ndarray, eps: float = 1.0) -> float:
    """1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    _, _, pg, pp, gg = _dice_terms(p, g)
    return 1.0 - (2.0 * pg + eps) / (pp + gg + eps)


def dice_grad(p: np.ndarray, g: np.ndarray, eps: float = 1.0) -> np.ndarray:
    """Analytic dL/dp_i of dice_loss, evaluated in float64."""
    p, g, pg, pp, gg = _dice_terms(p, g)
    num = 2.0 * pg + eps
    den = pp + gg + eps
    return (2.0 * p * num - 2.0 * g * den) / (den * den)


# ---------------------------------------------------------------------------
# Head checkpoints

_VARIANT_TAGS = {"linear": LinearHead, "mlp": MlpHead, "attn-avg": AttentionHead,
                 "attn-w": AttentionHead}


def head_variant_tag(head: Head) -> str:
    if isinstance(head, LinearHead):
        return "linear"
    if isinstance(head, MlpHead):
        return "mlp"
    return "attn-avg" if head.mode == "average" else "attn-w"


def save_head(head: Head, path, provenance: dict | None = None) -> None:
    tag = head_variant_tag(head)
    if isinstance(head, LinearHead):
        tensors = {f"head/{tag}/w": head.w,
                   f"head/{tag}/b": np.array([head.b], dtype=np.float32)}
    elif isinstance(head, MlpHead):
        tensors = {
            f"head/{tag}/w1": head.w1,
            f"head/{tag}/b1": head.b1,
            f"head/{tag}/w2": head.w2,
            f"head/{tag}/b2": np.array([head.b2], dtype=np.float32),
        }
    else:
        tensors = {f"head/{tag}/weights": head.weights}
    meta = {"variant": tag}
    meta.update(provenance or {})
    write_container(path, tensors, kind="head", meta=meta)


def load_head(path) -> Head:
    c = read_container(path)
    if c.kind != "head":
        raise ShapeError(f"container kind {c.kind!r} is not 'head'")
    tag = c.meta.get("variant")
    if tag == "linear":
        return LinearHead(np.array(c.tensor("head/linear/w")),
                          float(c.tensor("head/linear/b")[0]))
    if tag == "mlp":
        return MlpHead(
            np.array(c.tensor("head/mlp/w1")),
            np.array(c.tensor("head/mlp/b1")),
            np.array(c.tensor("head/mlp/w2")),
            float(c.tensor("head/mlp/b2")[0]),
        )
    if tag in ("attn-avg", "attn-w"):
        mode = "average" if tag == "attn-avg" else "weighted"
        return AttentionHead(mode, np.array(c.tensor(f"head/{tag}/weights")))
    raise ShapeError(f"unknown head variant {tag!r}")
