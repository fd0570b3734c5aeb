"""Reference-set encoding and similarity-based retrieval.

The reference set is the triple (segment embeddings, binary segment-label
assignments, label embeddings). For a test image cut into k masks the
per-pixel class probabilities are computed as

    A1 = softmax_rows(S_test @ S_ref^T) @ O_ref          (k x n)
    A2 = softmax_rows(L_ref @ L_test^T)                  (n x c)
    P_seg = A1 @ A2                                      (k x c)
    P_test[y, x, :] = sum_i P_seg[i, :] * mask_i[y, x]   (h x w x c)

and the label map is the per-pixel argmax. The first softmax is taken over
the reference segments, the second over the test classes; both carry an
optional temperature (default 1.0) and the first supports exact top-k logit
truncation. All intermediates are float64; stored artifacts are float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_array

from .core import EmbeddingMatrix, softmax64
from .errors import (
    DimMismatchError,
    EmptyInputError,
    InvalidConfigError,
    InvalidInputError,
    LexiconMissError,
    NotNormalizedError,
    OrphanLabelError,
    OrphanSegmentError,
    ShapeMismatchError,
    ZeroMeanError,
)
from .pairing import PairRecord
from .segmenter import IGNORE_ID, SegmentMaskSet

# Text prompt templates applied to every class name before encoding; the
# resulting embeddings are averaged into one label vector.
PROMPT_TEMPLATES = (
    "A photo of {},",
    "This is a photo of {},",
    "There is {} in the scene,",
    "A photo of {} in the scene.",
)


@dataclass(frozen=True)
class LabelInfo:
    """Metadata for one label column of the assignment matrix."""

    id: int
    phrase: str
    root: str
    source: str


@dataclass
class RetrievalConfig:
    temperature_a1: float = 1.0
    temperature_a2: float = 1.0
    top_k_candidates: int | None = None

    def __post_init__(self):
        if self.temperature_a1 <= 0 or self.temperature_a2 <= 0:
            raise InvalidConfigError("temperatures must be > 0")
        if self.top_k_candidates is not None and self.top_k_candidates < 1:
            raise InvalidConfigError("top_k_candidates must be >= 1 when set")


@dataclass
class ReferenceSet:
    """Immutable retrieval reference: segments, labels, and their assignments.

    ``assign_rows``/``assign_cols`` hold the nonzero coordinates of the
    binary m x n assignment matrix, sorted row-major. ``fingerprints``
    records the visual/text encoder identities captured at export time.
    """

    s_ref: EmbeddingMatrix
    l_ref: EmbeddingMatrix
    assign_rows: np.ndarray
    assign_cols: np.ndarray
    labels: list[LabelInfo]
    fingerprints: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.assign_rows = np.asarray(self.assign_rows, dtype=np.int64)
        self.assign_cols = np.asarray(self.assign_cols, dtype=np.int64)
        self._csr = None
        self.validate()

    @property
    def num_segments(self) -> int:
        return self.s_ref.rows

    @property
    def num_labels(self) -> int:
        return self.l_ref.rows

    @property
    def num_pairs(self) -> int:
        return int(self.assign_rows.size)

    def validate(self) -> None:
        m, n = self.num_segments, self.num_labels
        if m == 0 or n == 0:
            raise EmptyInputError("reference set must contain segments and labels")
        if len(self.labels) != n:
            raise InvalidInputError(f"{len(self.labels)} label records for {n} label rows")
        if self.assign_rows.shape != self.assign_cols.shape:
            raise InvalidInputError("assignment row/col arrays differ in length")
        if self.assign_rows.size == 0:
            raise EmptyInputError("reference set has no assignments")
        if self.assign_rows.min() < 0 or self.assign_rows.max() >= m:
            raise InvalidInputError("assignment row index out of range")
        if self.assign_cols.min() < 0 or self.assign_cols.max() >= n:
            raise InvalidInputError("assignment col index out of range")
        keys = self.assign_rows * n + self.assign_cols
        if not np.all(np.diff(keys) > 0):
            raise InvalidInputError("assignments must be strictly increasing row-major")
        if np.unique(self.assign_rows).size != m:
            raise OrphanSegmentError("every reference segment needs at least one label")
        if np.unique(self.assign_cols).size != n:
            raise OrphanLabelError("every reference label needs at least one segment")

    def assignment_csr(self) -> csr_array:
        if self._csr is None:
            ones = np.ones(self.assign_rows.size, dtype=np.float64)
            self._csr = csr_array(
                (ones, (self.assign_rows, self.assign_cols)),
                shape=(self.num_segments, self.num_labels),
            )
        return self._csr

    def labels_per_segment(self) -> np.ndarray:
        return np.bincount(self.assign_rows, minlength=self.num_segments)


def build_reference_set(
    pairs: list[PairRecord],
    segment_vectors: dict[tuple[str, int], np.ndarray],
    label_vectors: dict[str, np.ndarray],
    fingerprints: dict[str, str] | None = None,
) -> ReferenceSet:
    """Encode enhanced pairs as a reference set.

    Unique segments (keyed by image id and segment index, first-appearance
    order) become the segment rows; unique phrases become the label rows;
    the assignment matrix gets a 1 wherever a phrase labels a segment.
    ``segment_vectors`` supplies visual-space embeddings, ``label_vectors``
    text-space (template-averaged) embeddings; both must be unit vectors.
    """
    if not pairs:
        raise EmptyInputError("cannot build a reference set from zero pairs")
    seg_index: dict[tuple[str, int], int] = {}
    seg_rows = []
    label_index: dict[str, int] = {}
    label_rows = []
    label_meta: list[LabelInfo] = []
    coords: set[tuple[int, int]] = set()

    missing_terms = [p.phrase for p in pairs if p.phrase not in label_vectors]
    if missing_terms:
        raise LexiconMissError(set(missing_terms))

    for pair in pairs:
        seg_key = (pair.image_id, pair.segment_index)
        if seg_key not in seg_index:
            if seg_key not in segment_vectors:
                raise InvalidInputError(f"no visual embedding for segment {seg_key}")
            seg_index[seg_key] = len(seg_rows)
            seg_rows.append(segment_vectors[seg_key])
        if pair.phrase not in label_index:
            label_index[pair.phrase] = len(label_rows)
            label_rows.append(label_vectors[pair.phrase])
            label_meta.append(
                LabelInfo(
                    id=len(label_meta),
                    phrase=pair.phrase,
                    root=pair.root,
                    source=pair.source,
                )
            )
        coords.add((seg_index[seg_key], label_index[pair.phrase]))

    ordered = sorted(coords)
    rows = np.array([r for r, _ in ordered], dtype=np.int64)
    cols = np.array([c for _, c in ordered], dtype=np.int64)
    return ReferenceSet(
        s_ref=EmbeddingMatrix.from_rows(seg_rows, normalized=True),
        l_ref=EmbeddingMatrix.from_rows(label_rows, normalized=True),
        assign_rows=rows,
        assign_cols=cols,
        labels=label_meta,
        fingerprints=dict(fingerprints or {}),
    )


def compose_prompts(class_name: str) -> list[str]:
    """The four prompt templates with the class name substituted."""
    if not class_name:
        raise InvalidInputError("class name must be non-empty")
    return [t.format(class_name) for t in PROMPT_TEMPLATES]


def average_template_embeddings(per_template: EmbeddingMatrix) -> np.ndarray:
    """Arithmetic mean of the per-template rows, L2-renormalized."""
    if per_template.rows < 1:
        raise EmptyInputError("need at least one template embedding")
    mean = per_template.data.astype(np.float64).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= 1e-12:
        raise ZeroMeanError("template embeddings average to a near-zero vector")
    return (mean / norm).astype(np.float32)


def class_embeddings_from_lexicon(
    class_names: list[str], lookup: dict[str, np.ndarray]
) -> EmbeddingMatrix:
    """Template-averaged embedding for every class name.

    ``lookup`` must contain an embedding for each prompted template string.
    """
    missing = {
        prompt
        for name in class_names
        for prompt in compose_prompts(name)
        if prompt not in lookup
    }
    if missing:
        raise LexiconMissError(missing)
    rows = []
    for name in class_names:
        per_template = EmbeddingMatrix.from_rows(
            [lookup[p] for p in compose_prompts(name)], normalized=True
        )
        rows.append(average_template_embeddings(per_template))
    return EmbeddingMatrix.from_rows(rows, normalized=True)


def _check_normalized(m: EmbeddingMatrix, name: str) -> None:
    if not m.normalized:
        raise NotNormalizedError(f"{name} must be L2-normalized")


def affinity_a1(
    s_test: EmbeddingMatrix, ref: ReferenceSet, cfg: RetrievalConfig | None = None
) -> np.ndarray:
    """Affinity between test segments and reference labels (k x n, float64).

    Row softmax over the m reference segments, then product with the sparse
    assignment matrix. With ``top_k_candidates`` set, only the top-k logits
    per test segment survive (exact selection; the rest become -inf before
    the softmax). ``top_k_candidates = m`` reproduces the untruncated result
    bitwise.
    """
    cfg = cfg or RetrievalConfig()
    _check_normalized(s_test, "test segment embeddings")
    if s_test.dim != ref.s_ref.dim:
        raise DimMismatchError(
            f"test segment dim {s_test.dim} != reference dim {ref.s_ref.dim}"
        )
    m = ref.num_segments
    if cfg.top_k_candidates is not None and cfg.top_k_candidates > m:
        raise InvalidConfigError(
            f"top_k_candidates {cfg.top_k_candidates} exceeds reference size {m}"
        )
    logits = s_test.data.astype(np.float64) @ ref.s_ref.data.astype(np.float64).T
    if cfg.top_k_candidates is not None and cfg.top_k_candidates < m:
        k = cfg.top_k_candidates
        # Keep logits >= the k-th largest per row; mask the rest.
        kth = np.partition(logits, m - k, axis=1)[:, m - k]
        mask = logits < kth[:, None]
        logits = np.where(mask, -np.inf, logits)
    soft = softmax64(logits, cfg.temperature_a1, axis=1)
    return soft @ ref.assignment_csr()


def affinity_a2(
    ref: ReferenceSet, l_test: EmbeddingMatrix, cfg: RetrievalConfig | None = None
) -> np.ndarray:
    """Affinity between reference labels and test classes (n x c, float64).

    The softmax runs over the test classes, giving each reference label a
    distribution over classes.
    """
    cfg = cfg or RetrievalConfig()
    _check_normalized(l_test, "test class embeddings")
    if l_test.dim != ref.l_ref.dim:
        raise DimMismatchError(
            f"test class dim {l_test.dim} != reference label dim {ref.l_ref.dim}"
        )
    logits = ref.l_ref.data.astype(np.float64) @ l_test.data.astype(np.float64).T
    return softmax64(logits, cfg.temperature_a2, axis=1)


def segment_logits(a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    """Per-segment class logits ``A1 @ A2`` (k x c, float64 accumulation)."""
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    if a1.ndim != 2 or a2.ndim != 2 or a1.shape[1] != a2.shape[0]:
        raise DimMismatchError(f"cannot multiply {a1.shape} by {a2.shape}")
    return a1 @ a2


@dataclass
class PredictionMap:
    """Per-pixel class probabilities and the derived label map.

    ``label_map`` equals the per-pixel argmax of ``p_test`` (ties to the
    lowest class index); pixels covered by no mask are flagged in
    ``uncovered`` and carry the ignore sentinel.
    """

    p_test: np.ndarray       # (h, w, c) float32
    label_map: np.ndarray    # (h, w) uint32, IGNORE_ID where uncovered
    uncovered: np.ndarray    # (h, w) bool

    @property
    def num_classes(self) -> int:
        return self.p_test.shape[2]


def aggregate_pixels(p_seg: np.ndarray, masks: SegmentMaskSet) -> PredictionMap:
    """Spread per-segment class scores onto pixels and take the argmax.

    Overlapping masks sum their segments' score rows per pixel. Pixels in no
    mask get the ignore sentinel.
    """
    p_seg = np.asarray(p_seg, dtype=np.float64)
    if p_seg.ndim != 2:
        raise ShapeMismatchError(f"segment scores must be 2-D, got {p_seg.shape}")
    if p_seg.shape[0] != masks.k:
        raise ShapeMismatchError(f"{p_seg.shape[0]} score rows for {masks.k} masks")
    h, w = masks.h, masks.w
    c = p_seg.shape[1]

    if masks.partition is not None:
        ids = masks.partition
        covered = ids != IGNORE_ID
        acc = np.zeros((h, w, c), dtype=np.float64)
        acc[covered] = p_seg[ids[covered]]
    else:
        acc = np.zeros((h, w, c), dtype=np.float64)
        covered = np.zeros((h, w), dtype=bool)
        for i in range(masks.k):
            mask = masks.stack[i]
            acc[mask] += p_seg[i]
            covered |= mask

    p_test = acc.astype(np.float32)
    label_map = np.argmax(p_test, axis=2).astype(np.uint32)
    uncovered = ~covered
    label_map[uncovered] = IGNORE_ID
    return PredictionMap(p_test=p_test, label_map=label_map, uncovered=uncovered)


def predict_segments(
    ref: ReferenceSet,
    s_test: EmbeddingMatrix,
    l_test: EmbeddingMatrix | None = None,
    cfg: RetrievalConfig | None = None,
    a2: np.ndarray | None = None,
) -> np.ndarray:
    """P_seg for one test image; ``a2`` may be precomputed and shared."""
    cfg = cfg or RetrievalConfig()
    if a2 is None:
        if l_test is None:
            raise InvalidInputError("need test class embeddings or a precomputed A2")
        a2 = affinity_a2(ref, l_test, cfg)
    a1 = affinity_a1(s_test, ref, cfg)
    return segment_logits(a1, a2)
