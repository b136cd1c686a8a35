"""Localize generatively inpainted image regions.

Patch-token embeddings from a Vision-Transformer backbone are scored by a
small trainable head, fused across overlapping sliding windows into a
pixel-level logit heatmap, and thresholded into a manipulation mask. The
package also ships the evaluation metrics, robustness perturbations, dataset
plumbing, and head-training loop around that pipeline.
"""

__version__ = "0.1.0"

from .backends import EmbeddingBackend, FixtureBackend, ViTBackend
from .heads import AttentionHead, LinearHead, MlpHead, dice_grad, dice_loss
from .metrics import ScoreRow, aggregate, confusion, score_masks, scores
from .perturb import AugmentationPolicy, PerturbationSpec, apply, augment, robustness_grid
from .planes import BinaryMask, FloatPlane, ImagePlane, PatchGridGeometry
from .tiler import LocalizationResult, WindowPlan, localize, localize_single_window, plan_windows
from .trainer import TrainConfig, train_attention_weights, train_head
from .vit import EmbeddingGrid, ViTConfig, ViTWeights, forward, load_weights, save_weights

__all__ = [
    "AttentionHead",
    "AugmentationPolicy",
    "BinaryMask",
    "EmbeddingBackend",
    "EmbeddingGrid",
    "FixtureBackend",
    "FloatPlane",
    "ImagePlane",
    "LinearHead",
    "LocalizationResult",
    "MlpHead",
    "PatchGridGeometry",
    "PerturbationSpec",
    "ScoreRow",
    "TrainConfig",
    "ViTBackend",
    "ViTConfig",
    "ViTWeights",
    "WindowPlan",
    "aggregate",
    "apply",
    "augment",
    "confusion",
    "dice_grad",
    "dice_loss",
    "forward",
    "load_weights",
    "localize",
    "localize_single_window",
    "plan_windows",
    "robustness_grid",
    "save_weights",
    "score_masks",
    "scores",
    "train_attention_weights",
    "train_head",
]
