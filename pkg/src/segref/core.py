"""Foundational numeric kernels.

All embeddings are stored as row-major float32 matrices and are L2-normalized
before any similarity computation, so a plain matrix product equals cosine
similarity. Accumulation always happens in float64; float32 is a storage
format only. Every kernel is a pure function and is bit-deterministic for
fixed inputs regardless of how many worker threads are used: parallelism only
distributes independent output tiles, never a reduction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyInputError,
    NonPositiveTemperatureError,
    NotNormalizedError,
    ZeroMedianError,
    ZeroRowError,
)

# Row norms of a normalized matrix must sit within this band around 1.
NORM_TOLERANCE = 1e-5

# Row-block size for the tiled similarity product. Each tile is one BLAS call
# with a fixed shape, so the accumulation order per output element does not
# depend on the worker count.
_TILE_ROWS = 512


@dataclass
class EmbeddingMatrix:
    """Dense row-major matrix of float32 feature vectors.

    ``normalized`` asserts that every row has unit Euclidean norm (within
    ``NORM_TOLERANCE``); it is set by :func:`l2_normalize` and by file readers
    that verified the property.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise DimMismatchError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_rows(cls, rows, normalized: bool = False) -> "EmbeddingMatrix":
        return cls(np.asarray(rows, dtype=np.float32), normalized=normalized)


@dataclass
class SimilarityMatrix:
    """Float32 similarity/affinity matrix.

    Cosine entries lie in [-1, 1] (up to float32 rounding); rows produced by
    :func:`softmax_rows` are probability distributions.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise DimMismatchError(f"similarity matrix must be 2-D, got shape {arr.shape}")
        self.values = arr

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every row by its Euclidean norm.

    Raises:
        ZeroRowError: if any row has norm <= 1e-12; zero rows carry no
            direction and must be rejected rather than silently kept.
    """
    data64 = m.data.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", data64, data64))
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ZeroRowError(int(bad[0]))
    out = (data64 / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(out, normalized=True)


def _require_normalized(m: EmbeddingMatrix, name: str) -> None:
    if not m.normalized:
        raise NotNormalizedError(f"{name} must be L2-normalized (call l2_normalize first)")


def cosine_sim(a: EmbeddingMatrix, b: EmbeddingMatrix, threads: int = 1) -> SimilarityMatrix:
    """Cosine similarity ``result[i][j] = <a_i, b_j>`` for normalized inputs.

    Computed as a blocked matrix product with float64 accumulation inside
    each tile. Tiles are independent output row blocks, so the result is
    bit-identical for any ``threads`` value.
    """
    _require_normalized(a, "a")
    _require_normalized(b, "b")
    if a.dim != b.dim:
        raise DimMismatchError(f"dim mismatch: {a.dim} vs {b.dim}")
    a64 = a.data.astype(np.float64)
    bt64 = b.data.astype(np.float64).T
    out = np.empty((a.rows, b.rows), dtype=np.float32)
    tiles = range(0, a.rows, _TILE_ROWS)

    def run(start: int) -> None:
        stop = min(start + _TILE_ROWS, a.rows)
        out[start:stop] = np.dot(a64[start:stop], bt64).astype(np.float32)

    if threads <= 1 or a.rows <= _TILE_ROWS:
        for start in tiles:
            run(start)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tiles))
    return SimilarityMatrix(out)


def softmax64(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax in float64 (max subtraction per slice)."""
    if not temperature > 0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {temperature}")
    x = np.asarray(logits, dtype=np.float64) / temperature
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(s: SimilarityMatrix, temperature: float = 1.0) -> SimilarityMatrix:
    """Per-row softmax of ``values / temperature``.

    Each output row sums to 1 within 1e-6 and every entry lies in (0, 1].
    """
    return SimilarityMatrix(softmax64(s.values, temperature, axis=1).astype(np.float32))


def coordinatewise_median(rows: EmbeddingMatrix) -> np.ndarray:
    """Per-dimension median of the rows, L2-renormalized.

    For an even row count each coordinate takes the mean of the two middle
    values. The result is a unit float32 vector.

    Raises:
        EmptyInputError: no rows.
        ZeroMedianError: the median vector has norm <= 1e-12.
    """
    if rows.rows == 0:
        raise EmptyInputError("median of zero rows is undefined")
    med = np.median(rows.data.astype(np.float64), axis=0)
    norm = math.sqrt(float(np.dot(med, med)))
    if norm <= 1e-12:
        raise ZeroMedianError("median vector has near-zero norm")
    return (med / norm).astype(np.float32)


def medoid(rows: EmbeddingMatrix) -> np.ndarray:
    """Member row with the highest total cosine similarity to all rows.

    Alternative group-center strategy to :func:`coordinatewise_median`
    (ties resolve to the lowest row index). Input must be normalized.
    """
    if rows.rows == 0:
        raise EmptyInputError("medoid of zero rows is undefined")
    _require_normalized(rows, "rows")
    data64 = rows.data.astype(np.float64)
    totals = data64 @ data64.sum(axis=0)
    return rows.data[int(np.argmax(totals))].copy()
