"""Decision heads, Dice loss, and logit upsampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlens.errors import ShapeError, UnsupportedOperationError
from patchlens.heads import (
    AttentionHead,
    LinearHead,
    MlpHead,
    attention_logits,
    attention_scores,
    dice_grad,
    dice_loss,
    linear_logits,
    load_head,
    mlp_logits,
    patch_logits,
    save_head,
    sigmoid,
    upsample_logits,
)
from patchlens.planes import PatchGridGeometry
from patchlens.vit import EmbeddingGrid

from .oracles import dice_loss_reference


def make_grid(n_side=3, dim=6, seed=0, attn_heads=None, registers=1):
    rng = np.random.default_rng(seed)
    geometry = PatchGridGeometry(patch_size=2, grid_h=n_side, grid_w=n_side)
    n = geometry.num_patches
    attn = None
    if attn_heads:
        t = 1 + registers + n
        raw = rng.random((attn_heads, t, t))
        attn = (raw / raw.sum(axis=-1, keepdims=True)).astype(np.float32)
    return EmbeddingGrid(
        geometry=geometry,
        cls=rng.standard_normal(dim).astype(np.float32),
        registers=rng.standard_normal((registers, dim)).astype(np.float32),
        patches=rng.standard_normal((n, dim)).astype(np.float32),
        attentions_last=attn,
    )


class TestLinearHead:
    def test_zero_head_gives_half_probability(self):
        grid = make_grid()
        out = linear_logits(grid, LinearHead.zeros(6))
        np.testing.assert_array_equal(out.logits, 0.0)
        np.testing.assert_allclose(out.probabilities(), 0.5)

    def test_one_hot_head_reads_coordinate(self):
        grid = make_grid(seed=1)
        k = 4
        w = np.zeros(6, dtype=np.float32)
        w[k] = 1.0
        out = linear_logits(grid, LinearHead(w, 0.0))
        np.testing.assert_allclose(out.logits, grid.patches[:, k], atol=1e-7)

    def test_matches_double_precision_dot_oracle(self):
        grid = make_grid(seed=2)
        rng = np.random.default_rng(3)
        head = LinearHead(rng.standard_normal(6).astype(np.float32), 0.37)
        out = linear_logits(grid, head)
        for i in range(grid.geometry.num_patches):
            expected = sum(float(head.w[j]) * float(grid.patches[i, j]) for j in range(6))
            assert abs(float(out.logits[i]) - (expected + 0.37)) < 1e-5

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            linear_logits(make_grid(), LinearHead.zeros(7))

    def test_threshold_invariant_under_positive_scaling(self):
        grid = make_grid(seed=4)
        rng = np.random.default_rng(5)
        head = LinearHead(rng.standard_normal(6).astype(np.float32), -0.2)
        base = linear_logits(grid, head).logits > 0
        for lam in (0.01, 3.0, 250.0):
            scaled = LinearHead((head.w * lam).astype(np.float32), head.b * lam)
            np.testing.assert_array_equal(linear_logits(grid, scaled).logits > 0, base)

    def test_reference_parameter_count(self):
        head = LinearHead.zeros(768)
        assert head.w.size + 1 == 769

    def test_classifier_reuse_is_logit_difference(self):
        rng = np.random.default_rng(6)
        cw = rng.standard_normal((2, 6)).astype(np.float32)
        cb = np.array([0.1, -0.4], dtype=np.float32)
        head = LinearHead.from_image_classifier(cw, cb, fake_index=1)
        np.testing.assert_allclose(head.w, cw[1] - cw[0], atol=1e-7)
        assert head.b == pytest.approx(-0.5)


class TestMlpHead:
    def test_zero_weights_give_bias(self):
        grid = make_grid(seed=7)
        head = MlpHead.zeros(6)
        head.b2 = 1.25
        np.testing.assert_allclose(mlp_logits(grid, head).logits, 1.25, atol=1e-7)

    def test_identity_path_approximates_large_coordinate(self):
        # GELU(x) ~ x for x >> 0, so an identity first layer passes it through
        grid = make_grid(seed=8)
        patches = grid.patches.copy()
        patches[:, 2] = 30.0
        grid = EmbeddingGrid(grid.geometry, grid.cls, grid.registers, patches)
        head = MlpHead(np.eye(6, dtype=np.float32), np.zeros(6, dtype=np.float32),
                       np.eye(6, dtype=np.float32)[2], 0.0)
        np.testing.assert_allclose(mlp_logits(grid, head).logits, 30.0, atol=1e-4)

    def test_matches_scalar_oracle(self):
        import math

        grid = make_grid(seed=9)
        rng = np.random.default_rng(10)
        head = MlpHead(
            rng.standard_normal((6, 6)).astype(np.float32),
            rng.standard_normal(6).astype(np.float32),
            rng.standard_normal(6).astype(np.float32),
            -0.11,
        )
        out = mlp_logits(grid, head)
        for i in range(grid.geometry.num_patches):
            hidden = []
            for b in range(6):
                u = sum(float(grid.patches[i, a]) * float(head.w1[a, b]) for a in range(6))
                u += float(head.b1[b])
                hidden.append(0.5 * u * (1.0 + math.erf(u / math.sqrt(2.0))))
            expected = sum(h * float(head.w2[b]) for b, h in enumerate(hidden)) + head.b2
            assert abs(float(out.logits[i]) - expected) < 1e-5


class TestAttentionHead:
    def test_average_of_identical_heads_equals_single_row(self):
        grid = make_grid(seed=11, attn_heads=4)
        attn = np.broadcast_to(grid.attentions_last[0], grid.attentions_last.shape).copy()
        grid = EmbeddingGrid(grid.geometry, grid.cls, grid.registers, grid.patches, attn)
        scores = attention_scores(grid, AttentionHead.average(4))
        np.testing.assert_allclose(scores, attn[0, 0, 2:], atol=1e-6)

    def test_constant_attention_maps_to_half(self):
        grid = make_grid(seed=12, attn_heads=2)
        t = grid.attentions_last.shape[1]
        attn = np.full_like(grid.attentions_last, 1.0 / t)
        grid = EmbeddingGrid(grid.geometry, grid.cls, grid.registers, grid.patches, attn)
        out = attention_logits(grid, AttentionHead.average(2))
        np.testing.assert_array_equal(out.logits, 0.0)
        np.testing.assert_allclose(out.probabilities(), 0.5)

    def test_three_patch_toy_matches_hand_computation(self):
        geometry = PatchGridGeometry(patch_size=2, grid_h=1, grid_w=3)
        attn = np.full((2, 5, 5), 0.2, dtype=np.float32)
        attn[0, 0] = [0.1, 0.1, 0.5, 0.2, 0.1]  # CLS row: reg at col 1, patches at 2..4
        grid = EmbeddingGrid(
            geometry=geometry,
            cls=np.zeros(4, dtype=np.float32),
            registers=np.zeros((1, 4), dtype=np.float32),
            patches=np.zeros((3, 4), dtype=np.float32),
            attentions_last=attn,
        )
        head = AttentionHead("weighted", np.array([1.0, 0.0], dtype=np.float32))
        np.testing.assert_allclose(attention_scores(grid, head), [0.5, 0.2, 0.1], atol=1e-7)
        out = attention_logits(grid, head)
        expected_probs = [1.0 - 1e-6, 0.25, 1e-6]
        expected = [np.log(q / (1 - q)) for q in expected_probs]
        np.testing.assert_allclose(out.logits, expected, atol=1e-4)

    def test_missing_attention_rejected(self):
        grid = make_grid(seed=13)
        with pytest.raises(UnsupportedOperationError):
            attention_logits(grid, AttentionHead.average(2))


class TestDice:
    def test_perfect_match_is_zero(self):
        for g in ([1, 0, 1, 1], [0, 0, 0], [1]):
            arr = np.array(g, dtype=np.float64)
            assert dice_loss(arr, arr) == pytest.approx(0.0, abs=1e-12)

    def test_all_ones_vs_all_zeros(self):
        p = np.ones(4)
        g = np.zeros(4)
        assert dice_loss(p, g) == pytest.approx(0.8, abs=1e-12)

    def test_two_pixel_case(self):
        assert dice_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == pytest.approx(0.2)

    def test_matches_reference_forms(self):
        rng = np.random.default_rng(14)
        for n in (1, 16, 999):
            p = rng.random(n)
            g = (rng.random(n) > 0.5).astype(np.float64)
            assert dice_loss(p, g) == pytest.approx(dice_loss_reference(p, g), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(np.zeros(3), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2**31 - 1))
    def test_loss_in_unit_interval(self, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.random(n)
        g = (rng.random(n) > 0.5).astype(np.float64)
        loss = dice_loss(p, g)
        assert 0.0 <= loss < 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        step = 1e-4
        for n in (1, 16, 1296):
            p = rng.uniform(0.05, 0.95, n)
            g = (rng.random(n) > 0.5).astype(np.float64)
            grad = dice_grad(p, g)
            for i in rng.choice(n, size=min(n, 8), replace=False):
                hi = p.copy(); hi[i] += step
                lo = p.copy(); lo[i] -= step
                fd = (dice_loss(hi, g) - dice_loss(lo, g)) / (2 * step)
                denom = max(abs(fd), abs(grad[i]), 1e-12)
                assert abs(grad[i] - fd) / denom < 1e-4

    def test_gradient_single_pixel_cases(self):
        step = 1e-4
        for gval in (1.0, 0.0):
            p = np.array([0.5])
            g = np.array([gval])
            fd = (dice_loss(p + step, g) - dice_loss(p - step, g)) / (2 * step)
            assert dice_grad(p, g)[0] == pytest.approx(fd, rel=1e-4)


class TestUpsample:
    def test_single_patch_constant_plane(self):
        from patchlens.heads import PatchLogitGrid

        grid = PatchLogitGrid(PatchGridGeometry(4, 1, 1), np.array([2.5], dtype=np.float32))
        plane = upsample_logits(grid)
        assert plane.data.shape == (4, 4)
        np.testing.assert_array_equal(plane.data, 2.5)

    def test_two_by_two_blocks(self):
        from patchlens.heads import PatchLogitGrid

        grid = PatchLogitGrid(
            PatchGridGeometry(2, 2, 2), np.array([1, 2, 3, 4], dtype=np.float32)
        )
        plane = upsample_logits(grid)
        expected = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32
        )
        np.testing.assert_array_equal(plane.data, expected)

    def test_matches_index_oracle(self):
        from patchlens.heads import PatchLogitGrid

        rng = np.random.default_rng(16)
        g = PatchGridGeometry(3, 4, 4)
        logits = rng.standard_normal(16).astype(np.float32)
        plane = upsample_logits(PatchLogitGrid(g, logits))
        for y in range(12):
            for x in range(12):
                assert plane.data[y, x] == logits[(y // 3) * 4 + (x // 3)]

    def test_linear_head_plus_upsample_equals_one_by_one_conv(self):
        grid = make_grid(n_side=4, seed=17)
        rng = np.random.default_rng(18)
        head = LinearHead(rng.standard_normal(6).astype(np.float32), 0.05)
        plane = upsample_logits(linear_logits(grid, head))
        p, side = 2, 4
        for y in range(side * p):
            for x in range(side * p):
                i = (y // p) * side + (x // p)
                conv = float(np.dot(head.w.astype(np.float64),
                                    grid.patches[i].astype(np.float64))) + head.b
                assert abs(float(plane.data[y, x]) - conv) < 1e-5


class TestCheckpoints:
    @pytest.mark.parametrize("variant", ["linear", "mlp", "attn-avg", "attn-w"])
    def test_round_trip(self, tmp_path, variant):
        rng = np.random.default_rng(19)
        if variant == "linear":
            head = LinearHead(rng.standard_normal(6).astype(np.float32), 0.7)
        elif variant == "mlp":
            head = MlpHead(
                rng.standard_normal((6, 6)).astype(np.float32),
                rng.standard_normal(6).astype(np.float32),
                rng.standard_normal(6).astype(np.float32),
                -0.3,
            )
        elif variant == "attn-avg":
            head = AttentionHead.average(12)
        else:
            head = AttentionHead("weighted", rng.standard_normal(12).astype(np.float32))
        p = tmp_path / "head.vith"
        save_head(head, p, provenance={"epochs": 3})
        loaded = load_head(p)
        assert type(loaded) is type(head)
        grid = make_grid(dim=6, seed=20, attn_heads=12)
        np.testing.assert_array_equal(
            patch_logits(grid, loaded).logits, patch_logits(grid, head).logits
        )
