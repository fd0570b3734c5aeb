"""Data enhancement over the paired base set.

Three stages, all driven by collective structure rather than per-pair
cross-modal scores:

1. Ambiguous-label pruning: label groups whose size sits above the knee of
   the sorted (rank, log size) curve are ungrounded catch-alls ("background",
   "scene", ...) and are removed wholesale.
2. Group-based filtering: within each root-noun group, the members least
   similar to the group's center are treated as mispaired and dropped. Four
   strategies are supported; the default ranks by intra-modal similarity to
   the coordinate-wise median center.
3. Semantic enriching: the most similar root pairs across the label corpus
   are treated as synonyms, and each phrase gains a copy with its root token
   substituted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import EmbeddingMatrix, coordinatewise_median, medoid
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    MissingCrossModalScoresError,
    TooFewGroupsError,
)
from .pairing import PairRecord

_CHORD_EPS = 1e-12


class StrategyKind(Enum):
    """Filtering strategy variants, ordered as in the ablation study."""

    GLOBAL_CROSS_MODAL = "global-cross"          # (a) dataset-level score threshold
    GROUP_CROSS_MODAL = "group-cross"            # (b) per-group score ranking
    GROUP_INTRA_MODAL = "group-intra"            # (c) per-group center similarity
    GROUP_INTRA_MODAL_WEIGHTED = "group-intra-weighted"  # (d) consistency-adaptive ratio


@dataclass(frozen=True)
class FilterStrategy:
    kind: StrategyKind = StrategyKind.GROUP_INTRA_MODAL
    delta_filter: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.delta_filter <= 100.0:
            raise InvalidConfigError(
                f"delta_filter must be in [0, 100], got {self.delta_filter}"
            )


@dataclass
class LabelGroup:
    """All pairs sharing one root noun.

    ``members`` indexes into the pair list the group was built from;
    ``center`` is the unit group center; ``intra_scores`` and
    ``cross_scores`` align with ``members``.
    """

    root: str
    members: list[int]
    center: np.ndarray
    intra_scores: np.ndarray
    cross_scores: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class SynonymTable:
    """Unordered root pairs treated as synonyms."""

    pairs: frozenset[tuple[str, str]]
    k_sim: int

    def partners_of(self, root: str) -> list[str]:
        out = [b if a == root else a for a, b in self.pairs if root in (a, b)]
        return sorted(out)


def group_by_root(
    pairs: list[PairRecord],
    segment_embeddings: EmbeddingMatrix,
    center_strategy: str = "median",
) -> list[LabelGroup]:
    """Group pairs by root noun and compute per-group centers.

    ``segment_embeddings`` holds one row per pair (the visual embedding of
    the pair's segment). Centers use the coordinate-wise median by default;
    ``center_strategy="medoid"`` picks the most central member instead.
    Groups are returned sorted by root for determinism.
    """
    if segment_embeddings.rows != len(pairs):
        raise InvalidInputError(
            f"{len(pairs)} pairs but {segment_embeddings.rows} embedding rows"
        )
    if center_strategy not in ("median", "medoid"):
        raise InvalidConfigError(f"unknown center strategy {center_strategy!r}")
    by_root: dict[str, list[int]] = {}
    for idx, pair in enumerate(pairs):
        by_root.setdefault(pair.root, []).append(idx)

    groups = []
    for root in sorted(by_root):
        members = by_root[root]
        member_rows = EmbeddingMatrix(
            segment_embeddings.data[members], normalized=segment_embeddings.normalized
        )
        if center_strategy == "median":
            center = coordinatewise_median(member_rows)
        else:
            center = medoid(member_rows)
        intra = member_rows.data.astype(np.float64) @ center.astype(np.float64)
        cross = np.array([pairs[i].cross_modal_score for i in members], dtype=np.float64)
        groups.append(
            LabelGroup(
                root=root,
                members=members,
                center=center,
                intra_scores=intra,
                cross_scores=cross,
            )
        )
    return groups


def chord_distances(sizes_desc: np.ndarray) -> np.ndarray:
    """Perpendicular distance of each (rank, log size) point to the endpoint chord."""
    y = np.log(sizes_desc.astype(np.float64))
    n = y.size
    x = np.arange(n, dtype=np.float64)
    x0, y0, x1, y1 = 0.0, y[0], float(n - 1), y[-1]
    denom = math.hypot(y1 - y0, x1 - x0)
    if denom <= _CHORD_EPS:
        return np.zeros(n)
    return np.abs((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0) / denom


def prune_ambiguous_labels(
    groups: list[LabelGroup],
) -> tuple[list[LabelGroup], list[str]]:
    """Drop groups larger than the knee of the sorted size distribution.

    Group sizes are sorted descending and the knee is the point of maximum
    distance to the chord joining the curve's endpoints on a log-size scale.
    Groups strictly larger than the knee group are dropped. If the curve is
    the chord itself (all distances <= 1e-12), nothing is dropped.

    Returns the kept groups (input order preserved) and the sorted dropped
    roots.

    Raises:
        TooFewGroupsError: fewer than 3 distinct groups.
    """
    if len(groups) < 3:
        raise TooFewGroupsError(f"knee detection needs >= 3 groups, got {len(groups)}")
    order = sorted(groups, key=lambda g: (-g.size, g.root))
    sizes = np.array([g.size for g in order], dtype=np.int64)
    dist = chord_distances(sizes)
    if float(dist.max()) <= _CHORD_EPS:
        return list(groups), []
    knee_size = int(sizes[int(np.argmax(dist))])
    dropped = sorted(g.root for g in groups if g.size > knee_size)
    kept = [g for g in groups if g.size <= knee_size]
    return kept, dropped


def _floor_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n / 100.0))


def filter_group(
    group: LabelGroup,
    strategy: FilterStrategy,
    global_scores: np.ndarray | None = None,
) -> tuple[list[int], list[int]]:
    """Split a group's members into (kept, dropped) pair indices.

    Strategies (b)/(c) drop the ``floor(delta_filter * n / 100)`` lowest-
    scoring members, ranking by cross-modal score (b) or intra-modal
    similarity to the group center (c); ties break by ascending original
    index. Strategy (d) adapts the ratio to the group's consistency:
    ``clamp(2 * delta_filter * w, 0, 50)`` with ``w = mean(1 - intra_score)``.
    Strategy (a) instead applies one dataset-level threshold: the score at
    the ``delta_filter`` percentile of ``global_scores`` (members strictly
    below it are dropped). Single-member groups are exempt from filtering.
    """
    n = group.size
    if n <= 1:
        return list(group.members), []
    kind = strategy.kind

    if kind is StrategyKind.GLOBAL_CROSS_MODAL:
        if group.cross_scores is None:
            raise MissingCrossModalScoresError(f"group {group.root!r} has no cross-modal scores")
        if global_scores is None:
            raise MissingCrossModalScoresError("strategy (a) needs the dataset-wide score list")
        pool = np.sort(np.asarray(global_scores, dtype=np.float64))
        budget = _floor_count(strategy.delta_filter, pool.size)
        threshold = pool[budget] if budget < pool.size else math.inf
        dropped = [m for m, s in zip(group.members, group.cross_scores) if s < threshold]
        dropped_set = set(dropped)
        kept = [m for m in group.members if m not in dropped_set]
        return kept, dropped

    if kind is StrategyKind.GROUP_CROSS_MODAL:
        if group.cross_scores is None:
            raise MissingCrossModalScoresError(f"group {group.root!r} has no cross-modal scores")
        scores = group.cross_scores
        count = _floor_count(strategy.delta_filter, n)
    elif kind is StrategyKind.GROUP_INTRA_MODAL:
        scores = group.intra_scores
        count = _floor_count(strategy.delta_filter, n)
    elif kind is StrategyKind.GROUP_INTRA_MODAL_WEIGHTED:
        scores = group.intra_scores
        w = float(np.mean(1.0 - group.intra_scores))
        ratio = min(max(2.0 * strategy.delta_filter * w, 0.0), 50.0)
        count = _floor_count(ratio, n)
    else:  # pragma: no cover - enum is exhaustive
        raise InvalidConfigError(f"unknown strategy {kind}")

    # Stable ascending sort: equal scores drop in original-index order.
    order = np.argsort(scores, kind="stable")
    drop_pos = set(order[:count].tolist())
    kept = [m for p, m in enumerate(group.members) if p not in drop_pos]
    dropped = [m for p, m in enumerate(group.members) if p in drop_pos]
    return kept, dropped


def build_synonym_table(
    root_embeddings: EmbeddingMatrix, roots: list[str], k_sim: int
) -> SynonymTable:
    """The ``k_sim`` most cosine-similar unordered root pairs.

    One embedding per distinct root. Self-pairs are excluded; equal
    similarities break ties by lexicographic pair order.
    """
    if len(roots) != root_embeddings.rows:
        raise InvalidInputError(f"{len(roots)} roots but {root_embeddings.rows} rows")
    if len(set(roots)) != len(roots):
        raise InvalidInputError("roots must be distinct")
    if k_sim < 0:
        raise InvalidConfigError(f"k_sim must be >= 0, got {k_sim}")
    n = len(roots)
    if k_sim == 0 or n < 2:
        return SynonymTable(pairs=frozenset(), k_sim=k_sim)
    data64 = root_embeddings.data.astype(np.float64)
    sims = data64 @ data64.T
    candidates = []
    for i in range(n):
        for j in range(i + 1, n):
            a, b = sorted((roots[i], roots[j]))
            candidates.append((-float(sims[i, j]), a, b))
    candidates.sort()
    top = candidates[: min(k_sim, len(candidates))]
    return SynonymTable(pairs=frozenset((a, b) for _, a, b in top), k_sim=k_sim)


def _substitute_root(phrase: str, replacement: str) -> str:
    """Replace the phrase's final alphabetic token (its root token) whole."""
    parts = phrase.split()
    for i in range(len(parts) - 1, -1, -1):
        if any(ch.isalpha() for ch in parts[i]):
            return " ".join(parts[:i] + [replacement] + parts[i + 1 :])
    return replacement


def enrich_labels(pairs: list[PairRecord], table: SynonymTable) -> list[PairRecord]:
    """Add synonym-substituted phrases as extra labels on the same segments.

    Originals are retained, duplicates are removed, and the operation is
    idempotent: enriching an already-enriched list adds nothing.
    """
    out = list(pairs)
    seen = {(p.image_id, p.segment_index, p.phrase) for p in pairs}
    for pair in pairs:
        for partner in table.partners_of(pair.root):
            phrase = _substitute_root(pair.phrase, partner)
            key = (pair.image_id, pair.segment_index, phrase)
            if key in seen:
                continue
            seen.add(key)
            out.append(
                PairRecord(
                    image_id=pair.image_id,
                    segment_index=pair.segment_index,
                    phrase=phrase,
                    root=partner,
                    cross_modal_score=pair.cross_modal_score,
                    source="enriched",
                )
            )
    return out


@dataclass
class EnhancementReport:
    """Per-stage counts for the enhancement report file."""

    input_pairs: int = 0
    prune_applied: bool = False
    pruned_roots: list[str] = field(default_factory=list)
    pairs_removed_by_prune: int = 0
    filter_strategy: str = StrategyKind.GROUP_INTRA_MODAL.value
    delta_filter: float = 30.0
    groups_filtered: int = 0
    pairs_removed_by_filter: int = 0
    k_sim: int = 30
    synonym_pairs: list[list[str]] = field(default_factory=list)
    pairs_added_by_enrich: int = 0
    output_pairs: int = 0

    def to_dict(self) -> dict:
        return {
            "input_pairs": self.input_pairs,
            "prune": {
                "applied": self.prune_applied,
                "dropped_roots": self.pruned_roots,
                "pairs_removed": self.pairs_removed_by_prune,
            },
            "filter": {
                "strategy": self.filter_strategy,
                "delta_filter": self.delta_filter,
                "groups": self.groups_filtered,
                "pairs_removed": self.pairs_removed_by_filter,
            },
            "enrich": {
                "k_sim": self.k_sim,
                "synonym_pairs": self.synonym_pairs,
                "pairs_added": self.pairs_added_by_enrich,
            },
            "output_pairs": self.output_pairs,
        }


def enhance_pairs(
    pairs: list[PairRecord],
    segment_embeddings: EmbeddingMatrix,
    strategy: FilterStrategy,
    k_sim: int,
    root_vectors: dict[str, np.ndarray] | None = None,
    prune: bool = True,
    center_strategy: str = "median",
) -> tuple[list[PairRecord], list[int], EnhancementReport]:
    """Run pruning, filtering, and enriching over a paired dataset.

    ``segment_embeddings`` has one row per pair. ``root_vectors`` maps each
    surviving root to a unit text embedding (required when ``k_sim > 0``).

    Returns the enhanced pair list, the indices of surviving input pairs
    (before enrichment; aligned with the original list), and the report.
    Pruning is skipped with a note when fewer than 3 groups exist.
    """
    report = EnhancementReport(
        input_pairs=len(pairs),
        filter_strategy=strategy.kind.value,
        delta_filter=strategy.delta_filter,
        k_sim=k_sim,
    )
    groups = group_by_root(pairs, segment_embeddings, center_strategy)

    if prune and len(groups) >= 3:
        groups, dropped_roots = prune_ambiguous_labels(groups)
        report.prune_applied = True
        report.pruned_roots = dropped_roots
        report.pairs_removed_by_prune = len(pairs) - sum(g.size for g in groups)

    global_scores = None
    if strategy.kind is StrategyKind.GLOBAL_CROSS_MODAL:
        global_scores = np.concatenate(
            [g.cross_scores for g in groups]
        ) if groups else np.empty(0)

    survivors: list[int] = []
    removed = 0
    for group in groups:
        kept, dropped = filter_group(group, strategy, global_scores)
        survivors.extend(kept)
        removed += len(dropped)
    survivors.sort()
    report.groups_filtered = len(groups)
    report.pairs_removed_by_filter = removed

    surviving_pairs = [pairs[i] for i in survivors]

    if k_sim > 0 and surviving_pairs:
        roots = sorted({p.root for p in surviving_pairs})
        if root_vectors is None:
            raise InvalidInputError("k_sim > 0 requires root embeddings")
        missing = [r for r in roots if r not in root_vectors]
        if missing:
            raise InvalidInputError(f"missing root embeddings for: {missing[:5]}")
        mat = EmbeddingMatrix.from_rows([root_vectors[r] for r in roots], normalized=True)
        table = build_synonym_table(mat, roots, k_sim)
        report.synonym_pairs = [list(p) for p in sorted(table.pairs)]
        enhanced = enrich_labels(surviving_pairs, table)
    else:
        enhanced = list(surviving_pairs)

    report.pairs_added_by_enrich = len(enhanced) - len(surviving_pairs)
    report.output_pairs = len(enhanced)
    return enhanced, survivors, report
