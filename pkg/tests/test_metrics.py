"""Confusion counting and score formulas against counting oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlens.errors import ShapeError
from patchlens.metrics import (
    ConfusionCounts,
    aggregate,
    confusion,
    format_rows,
    format_table,
    score_masks,
    scores,
)
from patchlens.planes import BinaryMask

from .oracles import confusion_loops, scores_reference


def rand_mask(rng, h=16, w=16, p=0.5):
    return BinaryMask(rng.random((h, w)) < p)


class TestConfusion:
    def test_equal_masks_have_no_errors(self):
        rng = np.random.default_rng(0)
        m = rand_mask(rng)
        c = confusion(m, m)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == m.forged_pixels()

    def test_complement_has_no_agreement(self):
        rng = np.random.default_rng(1)
        m = rand_mask(rng)
        c = confusion(BinaryMask(~m.data), m)
        assert c.tp == 0 and c.tn == 0

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        pred, gt = rand_mask(rng), rand_mask(rng)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == confusion_loops(pred.data, gt.data)
        assert c.total == 256

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(BinaryMask(np.zeros((4, 4), bool)), BinaryMask(np.zeros((4, 5), bool)))


class TestScores:
    def test_both_empty_convention(self):
        row = scores(ConfusionCounts(0, 0, 0, 100), both_empty=True)
        assert row.iou == 1.0 and row.f1 == 1.0

    def test_empty_pred_nonempty_gt(self):
        row = scores(ConfusionCounts(0, 0, 50, 50), both_empty=False)
        assert row.iou == 0.0
        assert row.f1 == pytest.approx(0.0, abs=1e-7)

    def test_half_overlap_case(self):
        row = scores(ConfusionCounts(50, 25, 25, 0), both_empty=False)
        assert row.iou == pytest.approx(0.5, abs=1e-12)
        assert row.precision == pytest.approx(2 / 3, abs=1e-7)
        assert row.recall == pytest.approx(2 / 3, abs=1e-7)
        assert row.f1 == pytest.approx(2 / 3, abs=1e-7)

    def test_score_masks_derives_flag(self):
        empty = BinaryMask(np.zeros((8, 8), bool))
        assert score_masks(empty, empty).iou == 1.0
        gt = BinaryMask(np.eye(8, dtype=bool))
        assert score_masks(empty, gt).iou == 0.0

    @settings(max_examples=60, deadline=None)
    @given(tp=st.integers(0, 500), fp=st.integers(0, 500), fn=st.integers(0, 500))
    def test_f1_is_iou_harmonic_counterpart(self, tp, fp, fn):
        # with eps terms negligible, F1 == 2*IoU / (1 + IoU) on integer counts
        if tp + fp + fn == 0:
            return
        row = scores(ConfusionCounts(tp, fp, fn, 0), both_empty=False)
        expected = 2.0 * row.iou / (1.0 + row.iou)
        assert row.f1 == pytest.approx(expected, abs=1e-6)

    def test_swap_pred_gt_keeps_iou_f1(self):
        rng = np.random.default_rng(3)
        a, b = rand_mask(rng), rand_mask(rng)
        r1, r2 = score_masks(a, b), score_masks(b, a)
        assert r1.iou == r2.iou
        assert r1.f1 == pytest.approx(r2.f1, abs=1e-12)

    def test_monotone_in_tp(self):
        prev = -1.0
        for tp in range(0, 60, 7):
            row = scores(ConfusionCounts(tp, 30, 20, 0), both_empty=False)
            assert row.iou >= prev
            prev = row.iou

    def test_matches_reference_formulas(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pred, gt = rand_mask(rng), rand_mask(rng)
            c = confusion(pred, gt)
            both = pred.is_empty() and gt.is_empty()
            row = scores(c, both)
            ref = scores_reference(c.tp, c.fp, c.fn, both)
            assert (row.iou, row.f1, row.precision, row.recall) == pytest.approx(ref, abs=1e-12)


class TestAggregate:
    def rows(self):
        return [
            scores(ConfusionCounts(50, 25, 25, 0), False, dataset="a", image_id="1",
                   perturbation="none"),
            scores(ConfusionCounts(10, 0, 0, 0), False, dataset="a", image_id="2",
                   perturbation="none"),
            scores(ConfusionCounts(0, 0, 5, 5), False, dataset="b", image_id="3",
                   perturbation="jpeg-q80"),
        ]

    def test_single_row_is_itself(self):
        row = self.rows()[0]
        agg = aggregate([row])
        assert len(agg) == 1
        assert agg[0].iou == row.iou
        assert agg[0].count == 1

    def test_two_rows_mean(self):
        rows = [
            scores(ConfusionCounts(40, 60, 0, 0), False, dataset="a"),
            scores(ConfusionCounts(60, 40, 0, 0), False, dataset="a"),
        ]
        agg = aggregate(rows, group_by=("dataset",))
        assert agg[0].iou == pytest.approx(0.5, abs=1e-12)

    def test_matches_double_precision_oracle(self):
        rng = np.random.default_rng(5)
        rows = []
        for i in range(100):
            pred, gt = rand_mask(rng), rand_mask(rng)
            rows.append(score_masks(pred, gt, dataset=f"d{i % 3}", image_id=str(i)))
        for agg in aggregate(rows, group_by=("dataset",)):
            members = [r for r in rows if r.dataset == agg.key[0]]
            expected = sum(r.iou for r in members) / len(members)
            assert agg.iou == pytest.approx(expected, abs=1e-12)

    def test_empty_input_empty_table(self):
        assert aggregate([]) == []

    def test_deterministic_ordering_and_formats(self):
        rows = self.rows()
        table = format_table(aggregate(rows))
        assert table.splitlines()[0].startswith("dataset")
        assert table.index("a ") < table.index("b ")
        rendered = format_rows(rows)
        assert rendered.splitlines()[0] == "dataset,image,perturbation,iou,f1,precision,recall"
        assert len(rendered.splitlines()) == 4
