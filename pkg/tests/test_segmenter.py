from collections import deque

import numpy as np
import pytest

from segref.errors import ClassOutOfRangeError, EmptyInputError, InvalidInputError
from segref.segmenter import (
    IGNORE_ID,
    SegmentMaskSet,
    felzenszwalb_segment,
    gaussian_smooth,
)


def _connected(partition: np.ndarray, seg: int) -> bool:
    """BFS 8-connectivity check for one segment id."""
    ys, xs = np.nonzero(partition == seg)
    pixels = set(zip(ys.tolist(), xs.tolist()))
    start = next(iter(pixels))
    seen = {start}
    queue = deque([start])
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                nb = (y + dy, x + dx)
                if nb in pixels and nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
    return seen == pixels


class TestGaussianSmooth:
    def test_sigma_zero_identity(self, rng):
        img = rng.integers(0, 256, size=(6, 7, 3)).astype(np.uint8)
        out = gaussian_smooth(img, 0.0)
        np.testing.assert_array_equal(out, img.astype(np.float64))

    def test_constant_image_invariant(self):
        img = np.full((8, 8), 99, dtype=np.uint8)
        out = gaussian_smooth(img, 2.0)
        np.testing.assert_allclose(out, 99.0, atol=1e-9)

    def test_impulse_matches_analytic_kernel(self):
        img = np.zeros((17, 17), dtype=np.uint8)
        img[8, 8] = 255
        sigma = 1.0
        out = gaussian_smooth(img, sigma) / 255.0
        radius = int(4.0 * sigma + 0.5)
        xs = np.arange(-radius, radius + 1)
        kernel = np.exp(-(xs**2) / (2 * sigma**2))
        kernel /= kernel.sum()
        expected = np.outer(kernel, kernel)
        window = out[8 - radius : 8 + radius + 1, 8 - radius : 8 + radius + 1]
        np.testing.assert_allclose(window, expected, atol=1e-4)

    def test_negative_sigma_rejected(self):
        with pytest.raises(InvalidInputError):
            gaussian_smooth(np.zeros((2, 2), dtype=np.uint8), -1.0)


class TestFelzenszwalb:
    def test_uniform_image_single_segment(self):
        img = np.full((10, 12), 128, dtype=np.uint8)
        masks = felzenszwalb_segment(img, scale_k=100.0, sigma=0.0, min_size=1)
        assert masks.k == 1
        assert (masks.partition == 0).all()

    def test_min_size_full_image_forces_one_segment(self, rng):
        img = rng.integers(0, 256, size=(9, 9, 3)).astype(np.uint8)
        masks = felzenszwalb_segment(img, scale_k=1.0, sigma=0.0, min_size=81)
        assert masks.k == 1

    def test_two_solid_halves(self):
        img = np.zeros((10, 10, 3), dtype=np.uint8)
        img[:, 5:] = 255
        masks = felzenszwalb_segment(img, scale_k=1.0, sigma=0.0, min_size=10)
        assert masks.k == 2
        assert len(np.unique(masks.partition[:, :5])) == 1
        assert len(np.unique(masks.partition[:, 5:])) == 1

    def test_partition_and_connectivity_properties(self, rng):
        for _ in range(10):
            img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
            min_size = int(rng.integers(1, 20))
            masks = felzenszwalb_segment(img, scale_k=50.0, sigma=0.5, min_size=min_size)
            ids = masks.partition
            present = np.unique(ids)
            np.testing.assert_array_equal(present, np.arange(masks.k))
            counts = np.bincount(ids.ravel(), minlength=masks.k)
            assert (counts >= min_size).all()
            for seg in range(masks.k):
                assert _connected(ids, seg)

    def test_deterministic(self, rng):
        img = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
        a = felzenszwalb_segment(img, scale_k=80.0, sigma=0.8, min_size=4)
        b = felzenszwalb_segment(img, scale_k=80.0, sigma=0.8, min_size=4)
        np.testing.assert_array_equal(a.partition, b.partition)

    def test_ids_in_scan_order(self, rng):
        img = rng.integers(0, 256, size=(10, 10, 3)).astype(np.uint8)
        masks = felzenszwalb_segment(img, scale_k=60.0, sigma=0.4, min_size=2)
        seen = []
        for value in masks.partition.ravel():
            if value not in seen:
                seen.append(int(value))
        assert seen == list(range(masks.k))

    def test_single_pixel_image(self):
        masks = felzenszwalb_segment(np.zeros((1, 1), dtype=np.uint8), scale_k=1.0)
        assert masks.k == 1

    def test_rejects_bad_params(self):
        img = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(InvalidInputError):
            felzenszwalb_segment(img, scale_k=0.0)
        with pytest.raises(InvalidInputError):
            felzenszwalb_segment(img, scale_k=1.0, min_size=0)
        with pytest.raises(InvalidInputError):
            felzenszwalb_segment(img.astype(np.float32), scale_k=1.0)


class TestSegmentMaskSet:
    def test_partition_requires_dense_ids(self):
        ids = np.array([[0, 2], [0, 2]], dtype=np.uint32)
        with pytest.raises(InvalidInputError):
            SegmentMaskSet.from_partition(ids, k=3)

    def test_partition_rejects_out_of_range(self):
        ids = np.array([[0, 1]], dtype=np.uint32)
        with pytest.raises(ClassOutOfRangeError):
            SegmentMaskSet.from_partition(ids, k=1)

    def test_ignore_needs_flag(self):
        ids = np.array([[0, IGNORE_ID]], dtype=np.uint32)
        with pytest.raises(InvalidInputError):
            SegmentMaskSet.from_partition(ids, k=1)
        masks = SegmentMaskSet.from_partition(ids, k=1, allow_ignore=True)
        assert masks.k == 1

    def test_stack_rejects_empty_mask(self):
        stack = np.zeros((2, 3, 3), dtype=bool)
        stack[0, 0, 0] = True
        with pytest.raises(EmptyInputError):
            SegmentMaskSet.from_stack(stack)

    def test_round_trip_stack_view(self):
        ids = np.array([[0, 1], [1, 0]], dtype=np.uint32)
        masks = SegmentMaskSet.from_partition(ids, k=2)
        stack = masks.to_stack()
        np.testing.assert_array_equal(stack[0], ids == 0)
        np.testing.assert_array_equal(stack[1], ids == 1)
