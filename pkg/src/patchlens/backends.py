"""Embedding backends: anything that maps a fixed-size window to an EmbeddingGrid.

Backends must be deterministic (same window bytes, same grid). Two concrete
implementations live here: a live forward pass over loaded ViT weights, and a
replay backend that serves grids recorded in a fixture container keyed by
window content hash.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, runtime_checkable

import numpy as np

from .container import read_container, write_container
from .errors import MissingFixtureError
from .planes import ImagePlane, PatchGridGeometry
from .vit import EmbeddingGrid, ViTConfig, ViTWeights, forward, load_weights

FIXTURE_KIND = "embedding-fixtures"


@runtime_checkable
class EmbeddingBackend(Protocol):
    descriptor: str

    def embed(self, window: ImagePlane, want_attention: bool = False) -> EmbeddingGrid:
        ...


def window_content_hash(window: ImagePlane) -> str:
    """Content hash of a window: dims plus the raw float32 pixel bytes."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(window.data.shape, dtype="<u4").tobytes())
    h.update(window.data.astype("<f4").tobytes())
    return h.hexdigest()


class ViTBackend:
    """Live forward pass with in-memory weights."""

    def __init__(self, cfg: ViTConfig, weights: ViTWeights, provenance: str = "in-memory"):
        self.cfg = cfg
        self.weights = weights
        self.descriptor = f"vit(window={cfg.window},p={cfg.patch_size},D={cfg.embed_dim}," \
                          f"L={cfg.depth},r={cfg.registers}); {provenance}"

    @classmethod
    def from_file(cls, path) -> "ViTBackend":
        cfg, weights = load_weights(path)
        return cls(cfg, weights, provenance=f"weights:{path}")

    @property
    def window(self) -> int:
        return self.cfg.window

    def embed(self, window: ImagePlane, want_attention: bool = False) -> EmbeddingGrid:
        return forward(window, self.cfg, self.weights, want_attention=want_attention)


class FixtureBackend:
    """Replays exporter-recorded grids for known windows."""

    def __init__(self, path):
        self._container = read_container(path)
        if self._container.kind != FIXTURE_KIND:
            raise MissingFixtureError(f"container kind {self._container.kind!r} is not a fixture file")
        meta = self._container.meta
        self.geometry = PatchGridGeometry(
            meta["patch_size"], meta["grid_h"], meta["grid_w"]
        )
        self._keys = sorted(
            {name.split("/")[1] for name in self._container.names if name.startswith("window/")}
        )
        self.descriptor = f"fixture:{path} ({len(self._keys)} windows)"

    @property
    def window(self) -> int:
        return self.geometry.window

    def available_hashes(self) -> list[str]:
        return list(self._keys)

    def embed(self, window: ImagePlane, want_attention: bool = False) -> EmbeddingGrid:
        key = window_content_hash(window)
        base = f"window/{key}"
        if f"{base}/patches" not in self._container:
            raise MissingFixtureError(
                f"no fixture for window hash {key}; available: {', '.join(self._keys) or '(none)'}"
            )
        attn = None
        if want_attention:
            if f"{base}/attn" not in self._container:
                raise MissingFixtureError(f"fixture {key} was recorded without attention")
            attn = np.array(self._container.tensor(f"{base}/attn"))
        return EmbeddingGrid(
            geometry=self.geometry,
            cls=np.array(self._container.tensor(f"{base}/cls")),
            registers=np.array(self._container.tensor(f"{base}/registers")),
            patches=np.array(self._container.tensor(f"{base}/patches")),
            attentions_last=attn,
        )


def write_fixture_file(path, geometry: PatchGridGeometry,
                       grids: dict[str, EmbeddingGrid], meta: dict | None = None) -> None:
    """Record window-hash -> grid pairs in the fixture container layout."""
    tensors: dict[str, np.ndarray] = {}
    for key, grid in grids.items():
        base = f"window/{key}"
        tensors[f"{base}/patches"] = grid.patches
        tensors[f"{base}/cls"] = grid.cls
        tensors[f"{base}/registers"] = grid.registers
        if grid.attentions_last is not None:
            tensors[f"{base}/attn"] = grid.attentions_last
    full_meta = {
        "patch_size": geometry.patch_size,
        "grid_h": geometry.grid_h,
        "grid_w": geometry.grid_w,
    }
    full_meta.update(meta or {})
    write_container(path, tensors, kind=FIXTURE_KIND, meta=full_meta)
