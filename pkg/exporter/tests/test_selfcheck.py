"""Export self-checks and cross-runtime agreement with the consumer package."""

import json

import numpy as np
import pytest
import torch

from vitexport.cli import main
from vitexport.container import read_tensors, write_tensors
from vitexport.jobs import ExportJob, export_fixtures, export_weights, run_job

TINY_CONFIG = {"patch_size": 14, "embed_dim": 16, "depth": 2, "heads": 2,
               "registers": 4, "window": 28, "channels": 3, "mlp_ratio": 4}


def tiny_job(tmp_path, fixtures=True, **config_overrides):
    config = dict(TINY_CONFIG)
    config.update(config_overrides)
    return ExportJob(
        source="random:42",
        config=config,
        weights_out=str(tmp_path / "weights.vitw"),
        fixtures_out=str(tmp_path / "fixtures.vitf") if fixtures else None,
        fixture_images=["random:5"],
        fixture_seed=9,
        license_note="randomly initialized, no upstream license applies",
    )


class TestExportWeights:
    def test_reimport_reproduces_source_outputs(self, tmp_path):
        report = export_weights(tiny_job(tmp_path, fixtures=False))
        assert report["reimport_max_err"] < 1e-5

    def test_container_round_trip_byte_equal(self, tmp_path):
        job = tiny_job(tmp_path, fixtures=False)
        export_weights(job)
        kind, meta, tensors = read_tensors(job.weights_out)
        assert kind == "vit-weights"
        second = tmp_path / "again.vitw"
        write_tensors(second, tensors, kind=kind, meta=meta)
        assert second.read_bytes() == (tmp_path / "weights.vitw").read_bytes()

    def test_manifest_records_mapping_and_source(self, tmp_path):
        job = tiny_job(tmp_path, fixtures=False)
        export_weights(job)
        _, meta, _ = read_tensors(job.weights_out)
        assert meta["source"] == "random:42"
        assert meta["source_hash"] == "random-seed-42"
        assert any("ls1" in line for line in meta["mapping"])
        assert meta["license_note"]

    def test_twelve_block_manifest(self, tmp_path):
        job = tiny_job(tmp_path, fixtures=False, depth=12, embed_dim=8, heads=2)
        export_weights(job)
        _, meta, tensors = read_tensors(job.weights_out)
        blocks = {name.split("/")[0] for name in tensors if name.startswith("block")}
        assert blocks == {f"block{i}" for i in range(12)}
        assert meta["config"]["depth"] == 12

    def test_p16_variant_config_recorded(self, tmp_path):
        job = tiny_job(tmp_path, fixtures=False, patch_size=16, window=32)
        export_weights(job)
        _, meta, _ = read_tensors(job.weights_out)
        assert meta["config"]["patch_size"] == 16


class TestExportFixtures:
    def test_fixture_file_contents(self, tmp_path):
        job = tiny_job(tmp_path)
        run_job(job)
        kind, meta, tensors = read_tensors(job.fixtures_out)
        assert kind == "embedding-fixtures"
        assert meta["patch_size"] == 14
        assert meta["grid_h"] == meta["grid_w"] == 2
        keys = {name.split("/")[1] for name in tensors}
        assert len(keys) == 5
        for key in keys:
            attn = tensors[f"window/{key}/attn"]
            rows = attn.sum(axis=-1)
            np.testing.assert_allclose(rows, 1.0, atol=1e-5)
            assert tensors[f"window/{key}/patches"].shape == (4, 16)
            assert tensors[f"window/{key}/registers"].shape == (4, 16)

    def test_two_pass_determinism_enforced(self, tmp_path):
        # the determinism gate runs inside export_fixtures; it must pass on CPU
        job = tiny_job(tmp_path)
        export_weights(job)
        report = export_fixtures(job)
        assert report["windows"] == 5


class TestCrossRuntime:
    def test_primary_reads_export_and_agrees_on_fixtures(self, tmp_path):
        patchlens = pytest.importorskip("patchlens")
        from patchlens.backends import FixtureBackend
        from patchlens.planes import ImagePlane
        from patchlens.vit import forward, load_weights

        job = tiny_job(tmp_path)
        run_job(job)
        cfg, weights = load_weights(job.weights_out)
        assert (cfg.patch_size, cfg.embed_dim, cfg.depth) == (14, 16, 2)

        replay = FixtureBackend(job.fixtures_out)
        rng = np.random.default_rng(job.fixture_seed)
        worst = 0.0
        for _ in range(5):
            window_arr = rng.random((28, 28, 3)).astype(np.float32)
            window = ImagePlane(window_arr)
            stored = replay.embed(window, want_attention=True)  # hash-compatible
            live = forward(window, cfg, weights, want_attention=True)
            worst = max(worst, float(np.max(np.abs(stored.patches - live.patches))))
            worst = max(worst, float(np.max(np.abs(stored.cls - live.cls))))
            worst = max(worst, float(np.max(np.abs(
                stored.attentions_last - live.attentions_last
            ))))
        assert worst < 1e-3, f"cross-runtime disagreement {worst:.2e}"
        print(f"ACCEPTANCE PASS: cross-runtime fixture agreement (max err {worst:.2e})")

    def test_primary_container_reader_accepts_export(self, tmp_path):
        patchlens = pytest.importorskip("patchlens")
        from patchlens.container import read_container

        job = tiny_job(tmp_path, fixtures=False)
        export_weights(job)
        c = read_container(job.weights_out)
        assert c.kind == "vit-weights"
        assert "patch_proj_w" in c
        assert c.tensor("patch_proj_w").dtype == np.float32


class TestCli:
    def test_job_file_end_to_end(self, tmp_path, capsys):
        job_path = tmp_path / "job.json"
        job_path.write_text(json.dumps({
            "source": "random:1",
            "config": TINY_CONFIG,
            "weights_out": str(tmp_path / "w.vitw"),
            "fixtures_out": str(tmp_path / "f.vitf"),
            "fixture_images": ["random:2"],
            "fixture_seed": 3,
        }))
        assert main([str(job_path)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["weights"]["reimport_max_err"] < 1e-5
        assert report["fixtures"]["windows"] == 2

    def test_missing_job_file_errors(self, tmp_path, capsys):
        assert main([str(tmp_path / "nope.json")]) == 1
        assert "error" in capsys.readouterr().err
