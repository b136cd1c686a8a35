"""Export jobs: weight conversion, self-checks, and golden fixture generation.

A job file describes the source checkpoint (or a seeded random model), the
target architecture, output paths, and the self-check tolerance. Fixture
entries are keyed by the consumer's window content hash: blake2b-128 over the
(h, w, c) dims as little-endian u32 followed by the raw float32 pixel bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import read_tensors, write_tensors
from .mapping import (
    dinov2_to_interchange,
    interchange_to_torch_model,
    load_dinov2_state_dict,
    torchvit_state_dict,
)
from .torchvit import TorchViT

DEFAULT_CONFIG = {
    "patch_size": 14, "embed_dim": 768, "depth": 12, "heads": 12,
    "registers": 4, "window": 504, "channels": 3, "mlp_ratio": 4,
}


@dataclass
class ExportJob:
    source: str  # checkpoint path or "random:<seed>"
    config: dict
    weights_out: str
    fixtures_out: str | None = None
    fixture_images: list = field(default_factory=list)  # paths, or ["random:<n>"]
    fixture_seed: int = 0
    tolerance: float = 1.0e-5
    license_note: str = ""
    expected_source_hash: str = ""  # pin the upstream checkpoint, "" to skip

    @classmethod
    def from_file(cls, path) -> "ExportJob":
        with open(path) as f:
            raw = json.load(f)
        config = dict(DEFAULT_CONFIG)
        config.update(raw.get("config", {}))
        return cls(
            source=raw["source"],
            config=config,
            weights_out=raw["weights_out"],
            fixtures_out=raw.get("fixtures_out"),
            fixture_images=raw.get("fixture_images", []),
            fixture_seed=raw.get("fixture_seed", 0),
            tolerance=raw.get("tolerance", 1.0e-5),
            license_note=raw.get("license_note", ""),
            expected_source_hash=raw.get("expected_source_hash", ""),
        )


def window_content_hash(window_hwc: np.ndarray) -> str:
    """Must stay byte-compatible with the consumer's fixture lookup."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(window_hwc.shape, dtype="<u4").tobytes())
    h.update(np.ascontiguousarray(window_hwc, dtype="<f4").tobytes())
    return h.hexdigest()


def _build_source_model(job: ExportJob) -> tuple[TorchViT, dict, str]:
    """Returns (model, dinov2-named state dict, source hash)."""
    cfg = job.config
    model = TorchViT(
        patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"], depth=cfg["depth"],
        heads=cfg["heads"], registers=cfg["registers"], window=cfg["window"],
        channels=cfg.get("channels", 3), mlp_ratio=cfg.get("mlp_ratio", 4),
        layerscale=True, final_norm=True,
        classifier_classes=cfg.get("classifier_classes"),
    )
    if job.source.startswith("random:"):
        seed = int(job.source.split(":", 1)[1])
        model.randomize(seed)
        sd = torchvit_state_dict(model)
        source_hash = f"random-seed-{seed}"
    else:
        blob = Path(job.source).read_bytes()
        source_hash = hashlib.blake2b(blob, digest_size=16).hexdigest()
        if job.expected_source_hash and source_hash != job.expected_source_hash:
            raise RuntimeError(
                f"source checkpoint hash {source_hash} does not match the pinned "
                f"{job.expected_source_hash}"
            )
        sd = torch.load(job.source, map_location="cpu", weights_only=True)
        if isinstance(sd, dict) and "model" in sd and isinstance(sd["model"], dict):
            sd = sd["model"]
        load_dinov2_state_dict(model, sd)
    model.eval()
    return model, sd, source_hash


def _probe_image(cfg: dict, seed: int = 314) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((cfg.get("channels", 3), cfg["window"], cfg["window"]),
                      generator=gen)


def export_weights(job: ExportJob) -> dict:
    """Convert, write, and verify the weight file; returns the check report."""
    model, sd, source_hash = _build_source_model(job)
    tensors, table = dinov2_to_interchange(sd, job.config)
    meta = {
        "config": job.config,
        "source": job.source,
        "source_hash": source_hash,
        "license_note": job.license_note,
        "mapping": [f"{src} -> {dst}" for src, dst in table],
    }
    write_tensors(job.weights_out, tensors, kind="vit-weights", meta=meta)

    # self-check: the re-imported file must reproduce the source model
    kind, meta_back, tensors_back = read_tensors(job.weights_out)
    assert kind == "vit-weights"
    reimported = interchange_to_torch_model(tensors_back, meta_back["config"])
    probe = _probe_image(job.config)
    original, _ = model.forward_tokens(probe)
    rebuilt, _ = reimported.forward_tokens(probe)
    max_err = float((original - rebuilt).abs().max())
    if max_err > job.tolerance:
        raise RuntimeError(
            f"re-imported weights diverge from source outputs: {max_err:.3e} "
            f"> tolerance {job.tolerance:.0e}"
        )
    return {"tensors": len(tensors), "source_hash": source_hash,
            "reimport_max_err": max_err}


def _fixture_windows(job: ExportJob):
    """Yield (name, float32 HWC window) for each requested fixture image."""
    cfg = job.config
    window = cfg["window"]
    channels = cfg.get("channels", 3)
    for entry in job.fixture_images:
        if isinstance(entry, str) and entry.startswith("random:"):
            count = int(entry.split(":", 1)[1])
            rng = np.random.default_rng(job.fixture_seed)
            for i in range(count):
                yield (f"random{i}",
                       rng.random((window, window, channels)).astype(np.float32))
        else:
            from PIL import Image

            with Image.open(entry) as im:
                arr = np.asarray(im.convert("RGB" if channels == 3 else "L"),
                                 dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[:, :, None]
            h, w = arr.shape[:2]
            if h < window or w < window:
                raise ValueError(f"fixture image {entry} smaller than {window}px window")
            top, left = (h - window) // 2, (w - window) // 2
            yield (str(entry), arr[top : top + window, left : left + window])


def export_fixtures(job: ExportJob) -> dict:
    """Record source-runtime embeddings for each fixture window."""
    if not job.fixtures_out:
        raise ValueError("job has no fixtures_out path")
    kind, meta, tensors = read_tensors(job.weights_out)
    model = interchange_to_torch_model(tensors, meta["config"])
    cfg = meta["config"]
    side = cfg["window"] // cfg["patch_size"]
    out: dict[str, np.ndarray] = {}
    count = 0
    for name, window in _fixture_windows(job):
        x = torch.from_numpy(window).permute(2, 0, 1)
        tokens_a, probs_a = model.forward_tokens(x, want_attention=True)
        tokens_b, probs_b = model.forward_tokens(x, want_attention=True)
        drift = float((tokens_a - tokens_b).abs().max())
        if drift > 1e-6 or float((probs_a - probs_b).abs().max()) > 1e-6:
            raise RuntimeError(
                f"source runtime is nondeterministic on {name}: drift {drift:.3e}"
            )
        cls, regs, patches = model.split_tokens(tokens_a)
        key = window_content_hash(window)
        base = f"window/{key}"
        out[f"{base}/patches"] = patches.numpy()
        out[f"{base}/cls"] = cls.numpy()
        out[f"{base}/registers"] = regs.numpy()
        out[f"{base}/attn"] = probs_a.numpy()
        count += 1
    fixture_meta = {
        "patch_size": cfg["patch_size"], "grid_h": side, "grid_w": side,
        "weights_source_hash": meta.get("source_hash", ""),
    }
    write_tensors(job.fixtures_out, out, kind="embedding-fixtures", meta=fixture_meta)
    return {"windows": count}


def run_job(job: ExportJob) -> dict:
    report = {"weights": export_weights(job)}
    if job.fixtures_out:
        report["fixtures"] = export_fixtures(job)
    return report
