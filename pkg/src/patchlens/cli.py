"""Command-line interface: localize, evaluate, train, stats, perturb.

Every command writes exactly one ``run_manifest.json`` into its output
directory recording the resolved configuration, seeds, backend identity, and
timings. Reruns with an identical configuration produce byte-equal metric
reports. Exit codes: 0 success, 1 partial or total per-file failure, 2
usage/configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backends import FixtureBackend, ViTBackend
from .container import read_container
from .dataset import LabelPolicy, effective_mask, ingest, window_stats
from .heads import AttentionHead, load_head, save_head
from .metrics import aggregate, format_rows, format_table, score_masks
from .perturb import (
    AugmentationPolicy,
    apply as apply_perturbation,
    co_transform_mask,
    codec_descriptor,
    load_policy,
    robustness_grid,
)
from .planes import read_image, write_float_plane, write_image, write_mask, write_overlay
from .tiler import DEFAULT_MIN_SIZE, DEFAULT_STRIDE, localize
from .trainer import (
    SampleExample,
    TrainConfig,
    history_jsonl,
    train_attention_weights,
    train_head,
)

CACHE_ENV = "PATCHLENS_CACHE"

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _file_hash(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, backend_descriptor: str,
                    head_hash: str | None, seeds: dict, timings: dict,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "backend": backend_descriptor,
        "head_hash": head_hash,
        "codec": codec_descriptor(),
        "version": __version__,
        "timings": timings,
    }
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_backend(spec: str):
    """Backend path with optional kind prefix: [vit:|fixture:]/path/to/file."""
    if spec.startswith("vit:"):
        return ViTBackend.from_file(spec[4:])
    if spec.startswith("fixture:"):
        return FixtureBackend(spec[8:])
    kind = read_container(spec).kind
    if kind == "vit-weights":
        return ViTBackend.from_file(spec)
    if kind == "embedding-fixtures":
        return FixtureBackend(spec)
    raise ValueError(f"container {spec!r} holds {kind!r}, not a backend")


def _apply_config_file(args: argparse.Namespace) -> None:
    """Values from --config override the corresponding flags."""
    if getattr(args, "config", None):
        with open(args.config) as f:
            overrides = json.load(f)
        for key, value in overrides.items():
            if not hasattr(args, key):
                raise ValueError(f"config file sets unknown option {key!r}")
            setattr(args, key, value)


# ---------------------------------------------------------------------------
# localize


def cmd_localize(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = load_backend(args.backend)
    head = load_head(args.head)
    failures: list[tuple[str, str]] = []
    images = []
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    for path in args.images:
        try:
            img = read_image(path)
            result = localize(img, backend, head, stride=args.stride,
                              min_size=args.min_size, jobs=args.jobs,
                              threshold=args.threshold)
            stem = Path(path).stem
            write_mask(result.mask, out_dir / f"{stem}_mask.png")
            if args.heatmap:
                write_float_plane(result.heatmap, out_dir / f"{stem}_heatmap.fpl")
            if args.overlay:
                write_overlay(img, result.mask, out_dir / f"{stem}_overlay.png")
            images.append({
                "image": str(path),
                "windows": result.plan.num_windows,
                "padded": [result.plan.padded_h, result.plan.padded_w],
                "forged_pixels": result.mask.forged_pixels(),
            })
        except Exception as e:
            failures.append((str(path), str(e)))
            print(f"error: {path}: {e}", file=sys.stderr)
            if not args.keep_going:
                break
    timings["total"] = time.perf_counter() - t_start
    _write_manifest(
        out_dir, "localize",
        config={"stride": args.stride, "min_size": args.min_size,
                "threshold": args.threshold, "jobs": args.jobs},
        backend_descriptor=backend.descriptor, head_hash=_file_hash(args.head),
        seeds={}, timings=timings,
        extra={"images": images, "failures": failures},
    )
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def run_evaluation(samples, predict_fn, specs, seed: int = 0,
                   policy: LabelPolicy = LabelPolicy()):
    """Score every (sample, perturbation) pair.

    ``predict_fn(image, sample, spec) -> BinaryMask`` receives the perturbed
    image; the ground truth is co-transformed for geometric perturbations.
    """
    rows = []
    for sample in samples:
        img = sample.load_image()
        gt = effective_mask(sample, policy)
        for spec in specs:
            spec_seed = int.from_bytes(
                hashlib.blake2b(f"{seed}:{sample.image_id}:{spec.tag}".encode(),
                                digest_size=4).digest(), "little"
            )
            perturbed = apply_perturbation(img, spec, seed=spec_seed)
            gt_t = co_transform_mask(gt, spec)
            pred = predict_fn(perturbed, sample, spec)
            rows.append(score_masks(pred, gt_t, image_id=sample.image_id,
                                    dataset=sample.dataset, perturbation=spec.tag))
    return rows


_CURVE_FAMILIES = {
    "jpeg": ("quality", lambda s: s.quality),
    "double_jpeg": ("second_quality", lambda s: s.quality2),
    "resize": ("scale_percent", lambda s: s.scale_percent),
    "gauss_noise": ("sigma", lambda s: s.sigma),
}


def write_curves(rows, specs, out_dir: Path) -> None:
    """Per-family severity curves: mean F1 and IoU at each parameter value."""
    by_tag = {}
    for row in rows:
        by_tag.setdefault(row.perturbation, []).append(row)
    for family, (param_name, param_of) in _CURVE_FAMILIES.items():
        lines = [f"{param_name},f1,iou"]
        for spec in specs:
            if spec.kind != family or spec.tag not in by_tag:
                continue
            members = by_tag[spec.tag]
            f1 = float(np.mean([r.f1 for r in members]))
            iou = float(np.mean([r.iou for r in members]))
            lines.append(f"{param_of(spec):g},{f1:.6f},{iou:.6f}")
        if len(lines) > 1:
            (out_dir / f"curve_{family}.csv").write_text("\n".join(lines) + "\n")


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = load_backend(args.backend)
    head = load_head(args.head)
    report = ingest(args.root, args.manifest)
    samples = report.samples if args.split == "all" else report.by_split(args.split)
    samples = [s for s in samples if s.mask_path is not None or args.include_pristine]
    if not samples:
        print("error: no evaluable samples in the selected split", file=sys.stderr)
        return EXIT_USAGE
    specs = robustness_grid() if args.perturb == "grid" else [
        s for s in robustness_grid() if s.kind == "none"
    ]
    label_policy = LabelPolicy(args.labels)

    def predict(image, sample, spec):
        return localize(image, backend, head, stride=args.stride,
                        min_size=args.min_size, jobs=args.jobs,
                        threshold=args.threshold).mask

    t0 = time.perf_counter()
    rows = run_evaluation(samples, predict, specs, seed=args.seed, policy=label_policy)
    elapsed = time.perf_counter() - t0
    (out_dir / "rows.csv").write_text(format_rows(rows))
    (out_dir / "table.txt").write_text(
        format_table(aggregate(rows, group_by=("dataset", "perturbation")))
    )
    # pristine images are listed separately so means can be recomputed with
    # or without them from the same rows file
    pristine = sorted(s.image_id for s in samples if s.mask_path is None)
    if pristine:
        (out_dir / "pristine_images.txt").write_text("\n".join(pristine) + "\n")
    write_curves(rows, specs, out_dir)
    _write_manifest(
        out_dir, "evaluate",
        config={"split": args.split, "perturb": args.perturb, "labels": args.labels,
                "stride": args.stride, "min_size": args.min_size,
                "threshold": args.threshold, "jobs": args.jobs},
        backend_descriptor=backend.descriptor, head_hash=_file_hash(args.head),
        seeds={"eval": args.seed}, timings={"total": elapsed},
        extra={"rows": len(rows), "samples": len(samples),
               "skipped_ingest": report.skipped},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = load_backend(args.backend)
    policy = load_policy(args.policy) if args.policy else AugmentationPolicy(
        out_size=backend.window
    )
    train_overrides = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
    cfg = TrainConfig(**{"seed": args.seed, **train_overrides})
    label_policy = LabelPolicy(args.labels)

    head_path = out_dir / "head.vith"
    t0 = time.perf_counter()
    if args.variant == "attn-avg":
        # uniform weights need no optimization
        heads_n = getattr(getattr(backend, "cfg", None), "heads", 12)
        head = AttentionHead.average(heads_n)
        save_head(head, head_path, provenance={"variant": "attn-avg"})
        history_text = ""
        extra = {"trained": False, "attention_heads": heads_n}
    else:
        report = ingest(args.root, args.manifest)
        train_examples = [SampleExample(s, label_policy) for s in report.by_split("train")]
        val_examples = [SampleExample(s, label_policy) for s in report.by_split("val")]
        if not train_examples:
            print("error: training split is empty", file=sys.stderr)
            return EXIT_USAGE
        cache = None
        if os.environ.get(CACHE_ENV):
            from .trainer import EmbeddingCache

            cache = EmbeddingCache(Path(os.environ[CACHE_ENV]) / "embeddings", backend)
        if args.variant == "attn-w":
            result = train_attention_weights(backend, train_examples, cfg, policy)
        else:
            result = train_head(args.variant, backend, train_examples, val_examples,
                                cfg, policy, cache=cache)
        save_head(result.head, head_path, provenance={
            "dataset_hash": _file_hash(args.manifest),
            "epochs": len(result.history),
            "final_val_loss": result.best_val_loss,
            "aborted": result.aborted,
        })
        history_text = history_jsonl(result.history)
        extra = {"trained": True, "epochs": len(result.history),
                 "aborted": result.aborted, "best_val_loss": result.best_val_loss}
    if history_text:
        (out_dir / "history.jsonl").write_text(history_text)
    _write_manifest(
        out_dir, "train",
        config={"variant": args.variant, "labels": args.labels,
                "train_config": train_overrides},
        backend_descriptor=backend.descriptor, head_hash=_file_hash(head_path),
        seeds={"train": cfg.seed}, timings={"total": time.perf_counter() - t0},
        extra=extra,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def cmd_stats(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ingest(args.root, args.manifest)
    with_masks = [s for s in report.samples if s.mask_path is not None]
    missing = [s.image_id for s in report.samples if s.mask_path is None]
    t0 = time.perf_counter()
    stats = window_stats(with_masks, window=args.window, stride=args.stride,
                         min_size=args.min_size, bin_width=args.bin_width)
    per_image = "\n".join(
        f"{image_id},{value:.6f}" for image_id, value in sorted(stats.per_image.items())
    )
    (out_dir / "per_image.csv").write_text("image,window_fraction\n" + per_image + "\n"
                                           if per_image else "image,window_fraction\n")
    histogram = "\n".join(f"{low:.2f},{count}" for low, count in stats.histogram)
    (out_dir / "histogram.csv").write_text("bin_low,count\n" + histogram + "\n")
    summary = (
        f"images_with_masks {len(with_masks)}\n"
        f"images_without_modified_windows {stats.images_without_modified_windows}\n"
        f"mean_window_fraction {stats.mean_window_fraction:.6f}\n"
        f"mean_mask_fraction {stats.mean_mask_fraction:.6f}\n"
    )
    (out_dir / "summary.txt").write_text(summary)
    if missing:
        (out_dir / "missing_masks.txt").write_text("\n".join(missing) + "\n")
    _write_manifest(
        out_dir, "stats",
        config={"window": args.window, "stride": args.stride,
                "min_size": args.min_size, "bin_width": args.bin_width},
        backend_descriptor="none", head_hash=None, seeds={},
        timings={"total": time.perf_counter() - t0},
        extra={"missing_masks": len(missing)},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# perturb


def cmd_perturb(args) -> int:
    out_dir = Path(args.out)
    failures = []
    t0 = time.perf_counter()
    for path in args.images:
        try:
            img = read_image(path)
        except Exception as e:
            failures.append((str(path), str(e)))
            print(f"error: {path}: {e}", file=sys.stderr)
            if not args.keep_going:
                break
            continue
        stem = Path(path).stem
        for spec in robustness_grid():
            spec_dir = out_dir / spec.tag
            spec_dir.mkdir(parents=True, exist_ok=True)
            seed = int.from_bytes(
                hashlib.blake2b(f"{args.seed}:{stem}:{spec.tag}".encode(),
                                digest_size=4).digest(), "little"
            )
            write_image(apply_perturbation(img, spec, seed=seed),
                        spec_dir / f"{stem}__{spec.tag}.png")
    _write_manifest(
        out_dir, "perturb", config={"seed": args.seed},
        backend_descriptor="none", head_hash=None, seeds={"perturb": args.seed},
        timings={"total": time.perf_counter() - t0}, extra={"failures": failures},
    )
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlens",
        description="Localize generatively inpainted regions in images.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_tiling_flags(p):
        p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
        p.add_argument("--min-size", dest="min_size", type=int, default=DEFAULT_MIN_SIZE)
        p.add_argument("--threshold", type=float, default=0.0,
                       help="decision threshold in logit space")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("localize", help="write masks/heatmaps for images")
    p.add_argument("images", nargs="*")
    p.add_argument("--backend", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", action="store_true", help="also write raw heatmaps")
    p.add_argument("--overlay", action="store_true", help="also write red overlays")
    p.add_argument("--keep-going", action="store_true")
    p.add_argument("--config", help="JSON file whose values override flags")
    add_tiling_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score a dataset, optionally under the robustness grid")
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perturb", choices=["grid", "none"], default="none")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--labels", choices=["pristine", "fake"], default="pristine")
    p.add_argument("--include-pristine", action="store_true",
                   help="also score fully pristine images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose values override flags")
    add_tiling_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="train a head variant on a dataset")
    p.add_argument("--root")
    p.add_argument("--manifest")
    p.add_argument("--backend", required=True)
    p.add_argument("--variant", required=True,
                   choices=["linear", "mlp", "attn-avg", "attn-w"])
    p.add_argument("--out", required=True)
    p.add_argument("--labels", choices=["pristine", "fake"], default="pristine")
    p.add_argument("--policy", help="augmentation policy JSON")
    p.add_argument("--train-config", dest="train_config",
                   help="JSON with TrainConfig field overrides")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stats", help="window-coverage statistics of a dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=504)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--min-size", dest="min_size", type=int, default=DEFAULT_MIN_SIZE)
    p.add_argument("--bin-width", dest="bin_width", type=float, default=0.02)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("perturb", help="emit robustness-grid copies of images")
    p.add_argument("images", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-going", action="store_true")
    p.set_defaults(func=cmd_perturb)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "images", None) == []:
        print("error: no input images given", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _apply_config_file(args)
    except (OSError, ValueError, json.JSONDecodeError) as e:
        print(f"error: bad config file: {e}", file=sys.stderr)
        return EXIT_USAGE
    if os.environ.get(CACHE_ENV):
        os.makedirs(os.environ[CACHE_ENV], exist_ok=True)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
