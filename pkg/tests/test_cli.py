"""Command-line surface: exit codes, outputs, manifests, idempotence."""

import json

import numpy as np
import pytest

from patchlens.backends import window_content_hash, write_fixture_file
from patchlens.cli import main
from patchlens.heads import LinearHead, load_head, save_head
from patchlens.perturb import AugmentationPolicy, save_policy
from patchlens.planes import (
    BinaryMask,
    ImagePlane,
    crop,
    read_float_plane,
    read_mask,
    write_image,
    write_mask,
)
from patchlens.testing import MaskLeakBackend, indicator_image, planted_square_mask
from patchlens.tiler import _prepare_padded, plan_windows
from patchlens.vit import ViTConfig, random_weights, save_weights

TINY_VIT = ViTConfig(patch_size=14, embed_dim=8, depth=1, heads=2, registers=1,
                     window=28, channels=3)


def make_fixture_for(image: ImagePlane, backend, path, stride, min_size):
    """Record every window the tiler will request for `image`."""
    plan = plan_windows(image.height, image.width, window=backend.window,
                        stride=stride, min_size=min_size)
    padded = _prepare_padded(image, plan)
    grids = {}
    for top, left in plan.origins:
        window = crop(padded, top, left, plan.window, plan.window)
        grids[window_content_hash(window)] = backend.embed(window)
    write_fixture_file(path, backend.geometry, grids)
    return plan


def e0_head_file(tmp_path, dim=8):
    w = np.zeros(dim, dtype=np.float32)
    w[0] = 1.0
    path = tmp_path / "head.vith"
    save_head(LinearHead(w, 0.0), path)
    return path


def write_dataset(tmp_path, n=4, size=64, seed=0):
    rng = np.random.default_rng(seed)
    root = tmp_path / "data"
    (root / "seta" / "images").mkdir(parents=True, exist_ok=True)
    (root / "seta" / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = ImagePlane(rng.random((size, size, 3), dtype=np.float32))
        write_image(img, root / "seta" / "images" / f"img{i}.png")
        mask = np.zeros((size, size), dtype=bool)
        mask[8 : 8 + 20, 8 : 8 + 20] = True
        write_mask(BinaryMask(mask), root / "seta" / "masks" / f"img{i}.png")
    manifest = {
        "datasets": [{
            "name": "seta",
            "images": "seta/images/*.png",
            "masks": "seta/masks/{stem}.png",
            "background": "original",
        }],
        "split_seed": 0,
    }
    manifest_path = tmp_path / "manifest.json"
    manifest_path.write_text(json.dumps(manifest))
    return root, manifest_path


@pytest.fixture
def vit_backend_file(tmp_path):
    path = tmp_path / "backbone.vitw"
    save_weights(TINY_VIT, random_weights(TINY_VIT, seed=0), path)
    return path


class TestLocalize:
    def test_planted_square_through_fixture_backend(self, tmp_path):
        mask = planted_square_mask(1016, 1016, 300, 420, 280)
        image = indicator_image(mask, channels=3)
        img_path = tmp_path / "scene.png"
        write_image(image, img_path)
        backend = MaskLeakBackend(patch_size=14, window=504, dim=8)
        fixture_path = tmp_path / "grids.vitf"
        plan = make_fixture_for(image, backend, fixture_path, stride=128, min_size=1016)
        assert plan.num_windows == 25

        out = tmp_path / "out"
        code = main([
            "localize", str(img_path),
            "--backend", f"fixture:{fixture_path}",
            "--head", str(e0_head_file(tmp_path)),
            "--out", str(out), "--heatmap", "--overlay",
        ])
        assert code == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["images"][0]["windows"] == 25
        got = read_mask(out / "scene_mask.png")
        inter = np.logical_and(got.data, mask).sum()
        union = np.logical_or(got.data, mask).sum()
        assert inter / union >= 0.9
        # the CLI path must be bit-identical to calling the tiler directly
        from patchlens.heads import LinearHead
        from patchlens.tiler import localize

        w = np.zeros(8, dtype=np.float32)
        w[0] = 1.0
        direct = localize(image, backend, LinearHead(w, 0.0))
        np.testing.assert_array_equal(got.data, direct.mask.data)
        heat = read_float_plane(out / "scene_heatmap.fpl")
        assert heat.data.shape == (1016, 1016)
        assert heat.data.tobytes() == direct.heatmap.data.tobytes()
        assert (out / "scene_overlay.png").exists()

    def test_empty_input_is_usage_error(self, tmp_path, capsys):
        code = main(["localize", "--backend", "x", "--head", "y",
                     "--out", str(tmp_path)])
        assert code == 2
        assert "usage" in capsys.readouterr().err

    def test_unreadable_file_keep_going(self, tmp_path, vit_backend_file):
        good = tmp_path / "ok.png"
        rng = np.random.default_rng(1)
        write_image(ImagePlane(rng.random((32, 32, 3), dtype=np.float32)), good)
        bad = tmp_path / "missing.png"
        out = tmp_path / "out"
        code = main([
            "localize", str(bad), str(good),
            "--backend", str(vit_backend_file),
            "--head", str(e0_head_file(tmp_path)),
            "--out", str(out), "--keep-going", "--stride", "14", "--min-size", "28",
        ])
        assert code == 1
        assert (out / "ok_mask.png").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert len(manifest["failures"]) == 1

    def test_config_file_overrides_flags(self, tmp_path, vit_backend_file):
        img_path = tmp_path / "img.png"
        rng = np.random.default_rng(2)
        write_image(ImagePlane(rng.random((32, 32, 3), dtype=np.float32)), img_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"min_size": 28, "stride": 14}))
        out = tmp_path / "out"
        code = main([
            "localize", str(img_path), "--backend", str(vit_backend_file),
            "--head", str(e0_head_file(tmp_path)), "--out", str(out),
            "--config", str(cfg_path),
        ])
        assert code == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["min_size"] == 28


class TestEvaluate:
    def run_eval(self, tmp_path, vit_backend_file, perturb="grid", split="all"):
        root, manifest_path = write_dataset(tmp_path)
        out = tmp_path / "eval_out"
        code = main([
            "evaluate", "--root", str(root), "--manifest", str(manifest_path),
            "--backend", str(vit_backend_file),
            "--head", str(e0_head_file(tmp_path)),
            "--out", str(out), "--perturb", perturb, "--split", split,
            "--stride", "14", "--min-size", "28",
        ])
        return code, out

    def test_grid_produces_15_rows_per_image(self, tmp_path, vit_backend_file):
        code, out = self.run_eval(tmp_path, vit_backend_file)
        assert code == 0
        rows = (out / "rows.csv").read_text().splitlines()
        assert rows[0] == "dataset,image,perturbation,iou,f1,precision,recall"
        assert len(rows) == 1 + 4 * 15
        assert (out / "table.txt").exists()
        for family in ("jpeg", "double_jpeg", "resize", "gauss_noise"):
            curve = (out / f"curve_{family}.csv").read_text().splitlines()
            assert len(curve) >= 4  # header plus one line per severity level

    def test_rerun_byte_equal_reports(self, tmp_path, vit_backend_file):
        _, out1 = self.run_eval(tmp_path, vit_backend_file, perturb="none")
        rows1 = (out1 / "rows.csv").read_bytes()
        table1 = (out1 / "table.txt").read_bytes()
        import shutil

        shutil.rmtree(out1)
        _, out2 = self.run_eval(tmp_path, vit_backend_file, perturb="none")
        assert (out2 / "rows.csv").read_bytes() == rows1
        assert (out2 / "table.txt").read_bytes() == table1

    def test_plain_evaluation_single_spec(self, tmp_path, vit_backend_file):
        code, out = self.run_eval(tmp_path, vit_backend_file, perturb="none")
        assert code == 0
        rows = (out / "rows.csv").read_text().splitlines()
        assert len(rows) == 1 + 4
        assert all(",none," in line for line in rows[1:])


class TestTrain:
    def test_attn_avg_writes_uniform_weights(self, tmp_path, vit_backend_file):
        out = tmp_path / "train_out"
        code = main([
            "train", "--backend", str(vit_backend_file), "--variant", "attn-avg",
            "--out", str(out),
        ])
        assert code == 0
        head = load_head(out / "head.vith")
        np.testing.assert_allclose(head.weights, 1.0 / TINY_VIT.heads, atol=1e-7)

    def test_bad_variant_is_usage_error(self, tmp_path, vit_backend_file):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--backend", str(vit_backend_file),
                  "--variant", "nonsense", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_linear_training_end_to_end(self, tmp_path, vit_backend_file):
        root, manifest_path = write_dataset(tmp_path, n=6, size=64)
        policy = AugmentationPolicy(out_size=28, branch_probs=(0.0, 0.0, 1.0, 0.0),
                                    blur_p=0.0, noise_p=0.0, jitter_p=0.0,
                                    jpeg_p=0.0, jpeg2_p=0.0)
        policy_path = tmp_path / "policy.json"
        save_policy(policy, policy_path)
        train_cfg = tmp_path / "traincfg.json"
        train_cfg.write_text(json.dumps(
            {"batch": 2, "max_steps": 4, "max_epochs": 2, "steps_per_epoch": 2}
        ))
        out = tmp_path / "train_out"
        code = main([
            "train", "--root", str(root), "--manifest", str(manifest_path),
            "--backend", str(vit_backend_file), "--variant", "linear",
            "--out", str(out), "--policy", str(policy_path),
            "--train-config", str(train_cfg),
        ])
        assert code == 0
        head = load_head(out / "head.vith")
        assert head.w.shape == (8,)
        history = (out / "history.jsonl").read_text().splitlines()
        assert len(history) >= 1
        record = json.loads(history[0])
        assert {"epoch", "lr", "train_loss", "val_loss", "val_iou", "wall_time"} <= set(record)


class TestStats:
    def test_stats_outputs(self, tmp_path):
        root = tmp_path / "data"
        (root / "d" / "images").mkdir(parents=True, exist_ok=True)
        (root / "d" / "masks").mkdir(parents=True, exist_ok=True)
        full = np.ones((504, 504), dtype=bool)
        half = np.zeros((504, 504), dtype=bool)
        half[:, :252] = True
        rng = np.random.default_rng(3)
        for name, mask in (("full", full), ("half", half)):
            write_image(ImagePlane(rng.random((504, 504, 3), dtype=np.float32)),
                        root / "d" / "images" / f"{name}.png")
            write_mask(BinaryMask(mask), root / "d" / "masks" / f"{name}.png")
        write_image(ImagePlane(rng.random((504, 504, 3), dtype=np.float32)),
                    root / "d" / "images" / "nomask.png")
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps({
            "datasets": [{"name": "d", "images": "d/images/*.png",
                          "masks": "d/masks/{stem}.png", "background": "original"}],
        }))
        out = tmp_path / "stats_out"
        code = main(["stats", "--root", str(root), "--manifest", str(manifest_path),
                     "--out", str(out)])
        assert code == 0
        summary = (out / "summary.txt").read_text()
        assert "mean_window_fraction 0.812500" in summary
        per_image = (out / "per_image.csv").read_text().splitlines()
        assert len(per_image) == 3
        assert (out / "missing_masks.txt").read_text().strip() == "d/images/nomask"

    def test_empty_dataset_exits_zero(self, tmp_path):
        root = tmp_path / "data"
        root.mkdir()
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps({
            "datasets": [{"name": "d", "images": "d/images/*.png",
                          "masks": "d/masks/{stem}.png", "background": "original"}],
        }))
        out = tmp_path / "stats_out"
        code = main(["stats", "--root", str(root), "--manifest", str(manifest_path),
                     "--out", str(out)])
        assert code == 0
        assert (out / "histogram.csv").exists()


class TestPerturb:
    def test_emits_mirrored_tree(self, tmp_path):
        rng = np.random.default_rng(4)
        img_path = tmp_path / "photo.png"
        write_image(ImagePlane(rng.random((40, 40, 3), dtype=np.float32)), img_path)
        out = tmp_path / "perturbed"
        code = main(["perturb", str(img_path), "--out", str(out)])
        assert code == 0
        subdirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert len(subdirs) == 15
        assert "none" in subdirs and "jpeg-q100" in subdirs
        assert (out / "resize-150" / "photo__resize-150.png").exists()

    def test_empty_inputs_usage(self, tmp_path, capsys):
        assert main(["perturb", "--out", str(tmp_path)]) == 2
