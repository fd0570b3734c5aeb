import numpy as np
import pytest

from segref.core import EmbeddingMatrix, l2_normalize
from segref.enhance import (
    FilterStrategy,
    LabelGroup,
    StrategyKind,
    SynonymTable,
    build_synonym_table,
    enhance_pairs,
    enrich_labels,
    filter_group,
    group_by_root,
    prune_ambiguous_labels,
)
from segref.errors import MissingCrossModalScoresError, TooFewGroupsError
from segref.pairing import PairRecord

from oracles import chord_distances_oracle


def _pair(i, phrase, root=None, score=0.5, image=None):
    from segref.pairing import root_of_phrase

    return PairRecord(
        image_id=image or f"img{i}",
        segment_index=0,
        phrase=phrase,
        root=root or root_of_phrase(phrase),
        cross_modal_score=score,
    )


def _unit_rows(rows):
    return l2_normalize(EmbeddingMatrix(np.asarray(rows, dtype=np.float32)))


class TestGroupByRoot:
    def test_group_counts(self, rng):
        pairs = [_pair(0, "a small dog"), _pair(1, "an adorable dog"), _pair(2, "a cat")]
        emb = _unit_rows(rng.normal(size=(3, 4)))
        groups = group_by_root(pairs, emb)
        sizes = {g.root: g.size for g in groups}
        assert sizes == {"dog": 2, "cat": 1}

    def test_same_root_same_group(self, rng):
        pairs = [_pair(0, "a small dog"), _pair(1, "an adorable dog")]
        groups = group_by_root(pairs, _unit_rows(rng.normal(size=(2, 4))))
        assert len(groups) == 1 and groups[0].root == "dog"

    def test_singleton_intra_score_is_one(self, rng):
        pairs = [_pair(0, "a cat")]
        groups = group_by_root(pairs, _unit_rows(rng.normal(size=(1, 6))))
        assert groups[0].intra_scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_medoid_center_strategy(self, rng):
        pairs = [_pair(i, "a cat", image=f"img{i}") for i in range(5)]
        emb = _unit_rows(rng.normal(size=(5, 4)))
        groups = group_by_root(pairs, emb, center_strategy="medoid")
        assert any(np.array_equal(groups[0].center, row) for row in emb.data)


class TestPruneAmbiguousLabels:
    def _groups_of_sizes(self, sizes):
        groups = []
        for idx, size in enumerate(sizes):
            center = np.zeros(4, dtype=np.float32)
            center[0] = 1.0
            groups.append(
                LabelGroup(
                    root=f"root{idx}",
                    members=list(range(size)),
                    center=center,
                    intra_scores=np.ones(size),
                )
            )
        return groups

    def test_dominant_groups_dropped(self):
        sizes = [10000, 8000, 50, 49, 20, 10]
        dist = chord_distances_oracle(sorted(sizes, reverse=True))
        knee_size = sorted(sizes, reverse=True)[int(np.argmax(dist))]
        expected = {f"root{i}" for i, s in enumerate(sizes) if s > knee_size}
        assert expected == {"root0", "root1"}
        kept, dropped = prune_ambiguous_labels(self._groups_of_sizes(sizes))
        assert set(dropped) == expected
        assert {g.root for g in kept} == {f"root{i}" for i in range(2, 6)}

    def test_linear_log_sizes_nothing_dropped(self):
        kept, dropped = prune_ambiguous_labels(self._groups_of_sizes([8, 4, 2, 1]))
        assert dropped == [] and len(kept) == 4

    def test_equal_sizes_nothing_dropped(self):
        kept, dropped = prune_ambiguous_labels(self._groups_of_sizes([7, 7, 7, 7]))
        assert dropped == []

    def test_too_few_groups(self):
        with pytest.raises(TooFewGroupsError):
            prune_ambiguous_labels(self._groups_of_sizes([5, 3]))

    def test_input_order_invariance(self):
        sizes = [120, 9, 2000, 8, 7, 3000]
        base = prune_ambiguous_labels(self._groups_of_sizes(sizes))[1]
        groups = self._groups_of_sizes(sizes)
        shuffled = [groups[i] for i in (5, 0, 3, 2, 4, 1)]
        assert set(prune_ambiguous_labels(shuffled)[1]) == set(base)

    def test_ambient_style_roots_dropped(self, rng):
        pairs = []
        emb_rows = []
        for idx, (root, count) in enumerate(
            [("background", 400), ("scene", 250), ("image", 180), ("atmosphere", 150)]
        ):
            for i in range(count):
                pairs.append(_pair(len(pairs), f"the {root}", image=f"amb{idx}_{i}"))
                emb_rows.append(rng.normal(size=6))
        for idx, root in enumerate(["cat", "dog", "tree", "car", "boat", "lamp"]):
            for i in range(12):
                pairs.append(_pair(len(pairs), f"a small {root}", image=f"c{idx}_{i}"))
                emb_rows.append(rng.normal(size=6))
        groups = group_by_root(pairs, _unit_rows(np.asarray(emb_rows)))
        _, dropped = prune_ambiguous_labels(groups)
        assert set(dropped) == {"background", "scene", "image", "atmosphere"}


def _make_group(intra_scores, cross_scores=None, root="cat"):
    n = len(intra_scores)
    center = np.zeros(3, dtype=np.float32)
    center[0] = 1.0
    return LabelGroup(
        root=root,
        members=list(range(n)),
        center=center,
        intra_scores=np.asarray(intra_scores, dtype=np.float64),
        cross_scores=None if cross_scores is None else np.asarray(cross_scores, dtype=np.float64),
    )


class TestFilterGroup:
    def test_intra_modal_floor_count(self):
        scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
        group = _make_group(scores)
        kept, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 30.0))
        assert dropped == [0, 1, 2]
        assert kept == list(range(3, 10))

    def test_planted_outliers_dropped_with_margin(self, rng):
        inliers = [1.0 - 0.01 * rng.uniform() for _ in range(100)]
        outliers = [0.3 + 0.1 * rng.uniform() for _ in range(30)]
        group = _make_group(inliers + outliers)
        kept, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 30.0))
        assert len(dropped) == 39
        assert set(range(100, 130)) <= set(dropped)

    def test_all_identical_tie_floor(self):
        group = _make_group([0.8, 0.8, 0.8])
        kept, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 30.0))
        assert dropped == [] and kept == [0, 1, 2]

    def test_ties_break_by_ascending_index(self):
        group = _make_group([0.5, 0.5, 0.5, 0.5, 0.9])
        _, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 50.0))
        assert dropped == [0, 1]

    def test_single_member_exempt(self):
        group = _make_group([0.2])
        kept, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 90.0))
        assert kept == [0] and dropped == []

    def test_partition_property(self, rng):
        scores = rng.uniform(size=20)
        group = _make_group(scores)
        kept, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 35.0))
        assert sorted(kept + dropped) == list(range(20))
        assert set(kept) & set(dropped) == set()

    def test_group_cross_modal_ranking(self):
        group = _make_group([0.9] * 10, cross_scores=[0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.5, 0.55])
        _, dropped = filter_group(group, FilterStrategy(StrategyKind.GROUP_CROSS_MODAL, 30.0))
        assert dropped == [1, 3, 5]

    def test_missing_cross_scores(self):
        group = _make_group([0.5, 0.6])
        with pytest.raises(MissingCrossModalScoresError):
            filter_group(group, FilterStrategy(StrategyKind.GROUP_CROSS_MODAL, 30.0))
        with pytest.raises(MissingCrossModalScoresError):
            filter_group(group, FilterStrategy(StrategyKind.GLOBAL_CROSS_MODAL, 30.0))

    def test_global_threshold(self):
        cross = [0.05, 0.5, 0.6, 0.7]
        group = _make_group([0.9] * 4, cross_scores=cross)
        global_scores = np.array(cross + [0.1, 0.2, 0.3, 0.4, 0.8, 0.9])
        _, dropped = filter_group(
            group, FilterStrategy(StrategyKind.GLOBAL_CROSS_MODAL, 30.0), global_scores
        )
        # budget floor(0.3 * 10) = 3; threshold = 4th smallest (0.2); only
        # this group's 0.05 sits below it.
        assert dropped == [0]

    def test_weighted_ratio_zero_for_tight_group(self):
        group = _make_group([1.0] * 10)
        _, dropped = filter_group(
            group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL_WEIGHTED, 30.0)
        )
        assert dropped == []

    def test_weighted_ratio_clamped_at_half(self):
        group = _make_group([0.0] * 10)  # w = 1 -> ratio clamps to 50
        _, dropped = filter_group(
            group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL_WEIGHTED, 40.0)
        )
        assert len(dropped) == 5

    def test_weighted_ratio_midrange(self):
        group = _make_group([0.5] * 10)  # w = 0.5 -> ratio = 2*30*0.5 = 30
        _, dropped = filter_group(
            group, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL_WEIGHTED, 30.0)
        )
        assert len(dropped) == 3


class TestSynonymTable:
    def test_k_zero_empty(self, rng):
        emb = _unit_rows(rng.normal(size=(3, 4)))
        table = build_synonym_table(emb, ["cat", "dog", "car"], 0)
        assert table.pairs == frozenset()

    def test_planted_top_pair(self):
        rows = np.array([[1.0, 0.0, 0.0], [0.99, 0.14, 0.0], [0.0, 1.0, 0.0]])
        table = build_synonym_table(_unit_rows(rows), ["cat", "kitten", "car"], 1)
        assert table.pairs == frozenset({("cat", "kitten")})

    def test_k_exhausts_all_pairs(self, rng):
        emb = _unit_rows(rng.normal(size=(4, 5)))
        roots = ["a", "b", "c", "d"]
        table = build_synonym_table(emb, roots, 100)
        assert len(table.pairs) == 6

    def test_no_self_pairs(self, rng):
        emb = _unit_rows(rng.normal(size=(5, 6)))
        table = build_synonym_table(emb, list("abcde"), 10)
        assert all(a != b for a, b in table.pairs)

    def test_tie_break_lexicographic(self):
        rows = np.eye(3, dtype=np.float32)  # all pair similarities equal (0)
        table = build_synonym_table(EmbeddingMatrix(rows, normalized=True), ["b", "a", "c"], 1)
        assert table.pairs == frozenset({("a", "b")})


class TestEnrichLabels:
    def test_substitution_example(self):
        pairs = [_pair(0, "a small cat")]
        table = SynonymTable(pairs=frozenset({("cat", "kitten")}), k_sim=1)
        enriched = enrich_labels(pairs, table)
        phrases = {p.phrase for p in enriched}
        assert phrases == {"a small cat", "a small kitten"}
        added = [p for p in enriched if p.source == "enriched"][0]
        assert added.root == "kitten"
        assert added.segment_index == pairs[0].segment_index

    def test_empty_table_identity(self):
        pairs = [_pair(0, "a small cat"), _pair(1, "a big dog")]
        assert enrich_labels(pairs, SynonymTable(frozenset(), 0)) == pairs

    def test_two_synonyms_of_one_root(self):
        pairs = [_pair(0, "a small cat")]
        table = SynonymTable(frozenset({("cat", "kitten"), ("cat", "lion")}), 2)
        enriched = enrich_labels(pairs, table)
        assert {p.phrase for p in enriched} == {"a small cat", "a small kitten", "a small lion"}

    def test_idempotent(self):
        pairs = [_pair(0, "a small cat"), _pair(1, "a tiny kitten")]
        table = SynonymTable(frozenset({("cat", "kitten")}), 1)
        once = enrich_labels(pairs, table)
        twice = enrich_labels(once, table)
        assert once == twice

    def test_plural_token_replaced_whole(self):
        pairs = [_pair(0, "shiny bicycles", root="bicycle")]
        table = SynonymTable(frozenset({("bicycle", "bike")}), 1)
        enriched = enrich_labels(pairs, table)
        assert {p.phrase for p in enriched} == {"shiny bicycles", "shiny bike"}


class TestEnhancePairs:
    def test_end_to_end_counts(self, rng):
        pairs = []
        rows = []
        center_a = np.zeros(8)
        center_a[0] = 1.0
        center_b = np.zeros(8)
        center_b[1] = 1.0
        for i in range(10):
            pairs.append(_pair(len(pairs), "a small cat", image=f"a{i}"))
            rows.append(center_a + 0.01 * rng.normal(size=8))
        for i in range(4):  # planted outliers for "cat"
            pairs.append(_pair(len(pairs), "a big cat", image=f"o{i}"))
            rows.append(center_b + 0.01 * rng.normal(size=8))
        for i in range(10):
            pairs.append(_pair(len(pairs), "a small dog", image=f"b{i}"))
            rows.append(center_b + 0.01 * rng.normal(size=8))
        emb = _unit_rows(np.asarray(rows))
        enhanced, survivors, report = enhance_pairs(
            pairs,
            emb,
            FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 30.0),
            k_sim=0,
            prune=False,
        )
        # cat group has 14 members -> floor(4.2) = 4 dropped (the outliers);
        # dog group has 10 -> 3 dropped.
        assert report.pairs_removed_by_filter == 7
        dropped_phrases = {pairs[i].phrase for i in range(len(pairs)) if i not in survivors}
        assert "a big cat" in dropped_phrases
        assert report.output_pairs == len(enhanced) == len(pairs) - 7

    def test_requires_root_vectors_for_enrichment(self, rng):
        pairs = [_pair(0, "a small cat"), _pair(1, "a big dog")]
        emb = _unit_rows(rng.normal(size=(2, 4)))
        with pytest.raises(Exception):
            enhance_pairs(
                pairs, emb, FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 0.0), k_sim=2
            )
