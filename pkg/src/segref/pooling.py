"""Mask downscaling and mask average pooling.

A binary pixel mask is downscaled onto an encoder's patch grid by exact area
overlap: each patch's weight is the fraction of its pixel area covered by
the mask. Mask average pooling then reduces a dense feature map to one
embedding per segment: the weight-averaged feature vector, L2-normalized.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyMaskError, InvalidInputError, ShapeMismatchError, ZeroMeanError


def _overlap_matrix(n_pixels: int, n_cells: int) -> np.ndarray:
    """(n_cells x n_pixels) interval-overlap lengths in units of 1/n_cells.

    Cell p spans [p*n_pixels/n_cells, (p+1)*n_pixels/n_cells) in pixel
    coordinates; entry (p, i) is its overlap with pixel interval [i, i+1).
    Numerators are integers, so the overlap fractions are exact.
    """
    p = np.arange(n_cells, dtype=np.int64)[:, None]
    i = np.arange(n_pixels, dtype=np.int64)[None, :]
    lo = np.maximum(p * n_pixels, i * n_cells)
    hi = np.minimum((p + 1) * n_pixels, (i + 1) * n_cells)
    return np.maximum(hi - lo, 0).astype(np.float64)


def downscale_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Area-fraction weights of a binary mask on a (grid_h x grid_w) grid.

    Each weight is the exact fraction of the patch's pixel area covered by
    the mask, including fractional overlaps when the image size is not
    divisible by the grid size. Weights lie in [0, 1].
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2-D, got {mask.shape}")
    if grid_h < 1 or grid_w < 1:
        raise InvalidInputError("grid dims must be >= 1")
    h, w = mask.shape
    rows = _overlap_matrix(h, grid_h)          # (grid_h, h), units of 1/grid_h
    cols = _overlap_matrix(w, grid_w)          # (grid_w, w), units of 1/grid_w
    covered = rows @ mask.astype(np.float64) @ cols.T
    # Patch area in the same units: (h*grid_h/grid_h) * (w*grid_w/grid_w).
    return covered / (float(h) * float(w))


def mask_average_pool(feat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of feature-map vectors under a weight grid, normalized.

    ``feat`` is (grid_h, grid_w, d); ``weights`` is (grid_h, grid_w). The
    result is invariant to uniform scaling of the weights.

    Raises:
        EmptyMaskError: total weight <= 1e-9.
    """
    feat = np.asarray(feat, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if feat.ndim != 3:
        raise ShapeMismatchError(f"feature map must be (gh, gw, d), got {feat.shape}")
    if weights.shape != feat.shape[:2]:
        raise ShapeMismatchError(
            f"weights {weights.shape} do not match feature grid {feat.shape[:2]}"
        )
    total = float(weights.sum())
    if total <= 1e-9:
        raise EmptyMaskError("mask has near-zero area on the feature grid")
    pooled = np.einsum("hw,hwd->d", weights, feat) / total
    norm = float(np.linalg.norm(pooled))
    if norm <= 1e-12:
        raise ZeroMeanError("pooled feature has near-zero norm")
    return (pooled / norm).astype(np.float32)
