import numpy as np
import pytest

from segref.errors import (
    ClassOutOfRangeError,
    NoEvaluatedClassesError,
    ShapeMismatchError,
)
from segref.metrics import ConfusionMatrix, accumulate, miou
from segref.segmenter import IGNORE_ID

from oracles import set_iou


class TestAccumulate:
    def test_perfect_prediction_fills_diagonal(self, rng):
        raster = rng.integers(0, 3, size=(6, 6)).astype(np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(3), raster, raster)
        assert np.diag(conf.counts).sum() == 36
        assert conf.counts.sum() == 36

    def test_all_ignored_unchanged(self):
        raster = np.full((4, 4), IGNORE_ID, dtype=np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(2), raster, raster)
        assert conf.counts.sum() == 0

    def test_hand_counted_case(self):
        gt = np.array([[0, 0], [1, 1]], dtype=np.uint32)
        pred = np.array([[0, 1], [1, 1]], dtype=np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(2), pred, gt)
        np.testing.assert_array_equal(conf.counts, [[1, 1], [0, 2]])

    def test_either_side_ignore_skipped(self):
        gt = np.array([[0, IGNORE_ID]], dtype=np.uint32)
        pred = np.array([[IGNORE_ID, 1]], dtype=np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(2), pred, gt)
        assert conf.counts.sum() == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            accumulate(
                ConfusionMatrix.zeros(2),
                np.zeros((2, 2), dtype=np.uint32),
                np.zeros((2, 3), dtype=np.uint32),
            )

    def test_class_out_of_range(self):
        with pytest.raises(ClassOutOfRangeError):
            accumulate(
                ConfusionMatrix.zeros(2),
                np.array([[2]], dtype=np.uint32),
                np.array([[0]], dtype=np.uint32),
            )


class TestMiou:
    def test_perfect_is_one(self, rng):
        raster = rng.integers(0, 4, size=(8, 8)).astype(np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(4), raster, raster)
        mean, per_class = miou(conf)
        assert mean == 1.0

    def test_half_half_degenerate_quarter(self):
        gt = np.zeros((4, 4), dtype=np.uint32)
        gt[2:] = 1
        pred = np.zeros((4, 4), dtype=np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(2), pred, gt)
        mean, per_class = miou(conf)
        assert mean == 0.25
        np.testing.assert_array_equal(per_class, [0.5, 0.0])

    def test_random_matches_set_oracle(self, rng):
        for _ in range(10):
            gt = rng.integers(0, 3, size=(8, 8)).astype(np.uint32)
            pred = rng.integers(0, 3, size=(8, 8)).astype(np.uint32)
            conf = accumulate(ConfusionMatrix.zeros(3), pred, gt)
            mean, per_class = miou(conf)
            oracle_mean, oracle_per = set_iou(pred, gt, 3)
            assert mean == pytest.approx(oracle_mean, abs=1e-9)
            for got, want in zip(per_class, oracle_per):
                if want is None:
                    assert np.isnan(got)
                else:
                    assert got == pytest.approx(want, abs=1e-9)

    def test_absent_classes_excluded(self):
        gt = np.zeros((2, 2), dtype=np.uint32)
        pred = np.zeros((2, 2), dtype=np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(5), pred, gt)
        mean, per_class = miou(conf)
        assert mean == 1.0
        assert np.isnan(per_class[1:]).all()

    def test_no_evaluated_classes(self):
        with pytest.raises(NoEvaluatedClassesError):
            miou(ConfusionMatrix.zeros(3))

    def test_accumulation_order_invariant(self, rng):
        rasters = [
            (
                rng.integers(0, 3, size=(5, 5)).astype(np.uint32),
                rng.integers(0, 3, size=(5, 5)).astype(np.uint32),
            )
            for _ in range(4)
        ]
        a = ConfusionMatrix.zeros(3)
        for pred, gt in rasters:
            accumulate(a, pred, gt)
        b = ConfusionMatrix.zeros(3)
        for pred, gt in reversed(rasters):
            accumulate(b, pred, gt)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_class_permutation_preserves_miou(self, rng):
        gt = rng.integers(0, 3, size=(6, 6)).astype(np.uint32)
        pred = rng.integers(0, 3, size=(6, 6)).astype(np.uint32)
        conf = accumulate(ConfusionMatrix.zeros(3), pred, gt)
        mean, per_class = miou(conf)
        perm = np.array([2, 0, 1])
        conf_p = accumulate(ConfusionMatrix.zeros(3), perm[pred], perm[gt])
        mean_p, per_class_p = miou(conf_p)
        assert mean == pytest.approx(mean_p, abs=1e-12)
        np.testing.assert_allclose(per_class_p[perm], per_class, atol=1e-12)
