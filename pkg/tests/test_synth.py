import numpy as np
import pytest

from segref.core import EmbeddingMatrix
from segref.enhance import FilterStrategy, StrategyKind, filter_group, group_by_root
from segref.errors import InfeasibleSpecError
from segref.pairing import pair_labels_to_segments
from segref.synth import SynthSpec, SynthWorld, generate


def _pairs_and_vis(world: SynthWorld):
    pairs = []
    for bundle in world.bundles:
        pairs.extend(pair_labels_to_segments(bundle))
    vis = EmbeddingMatrix.from_rows(
        [world.vis_embeddings[p.image_id].data[p.segment_index] for p in pairs],
        normalized=True,
    )
    return pairs, vis


class TestGenerate:
    def test_noiseless_world_sits_on_centers(self):
        spec = SynthSpec(seed=5, n_concepts=3, dim=10, samples_per_concept=4,
                         noise_radius=0.0, misalignment_rate=0.0)
        world = generate(spec)
        assert world.outliers == []
        by_concept = {}
        for (img, seg), concept in world.truth_concepts.items():
            by_concept.setdefault(concept, []).append(world.vis_embeddings[img].data[seg])
        for rows in by_concept.values():
            for row in rows[1:]:
                np.testing.assert_array_equal(row, rows[0])
            assert np.linalg.norm(rows[0]) == pytest.approx(1.0, abs=1e-6)

    def test_same_seed_identical(self):
        spec_a = SynthSpec(seed=42, n_concepts=4, dim=12, samples_per_concept=6)
        spec_b = SynthSpec(seed=42, n_concepts=4, dim=12, samples_per_concept=6)
        wa, wb = generate(spec_a), generate(spec_b)
        assert [b.image_id for b in wa.bundles] == [b.image_id for b in wb.bundles]
        for ba, bb in zip(wa.bundles, wb.bundles):
            np.testing.assert_array_equal(ba.segment_embeddings.data, bb.segment_embeddings.data)
            np.testing.assert_array_equal(ba.phrase_embeddings.data, bb.phrase_embeddings.data)
            assert ba.phrases == bb.phrases
        np.testing.assert_array_equal(wa.lexicon.matrix.data, wb.lexicon.matrix.data)
        assert wa.outliers == wb.outliers

    def test_different_seed_differs(self):
        wa = generate(SynthSpec(seed=1, n_concepts=3, dim=10, samples_per_concept=4))
        wb = generate(SynthSpec(seed=2, n_concepts=3, dim=10, samples_per_concept=4))
        assert not np.array_equal(
            wa.bundles[0].segment_embeddings.data, wb.bundles[0].segment_embeddings.data
        )

    def test_infeasible_specs(self):
        with pytest.raises(InfeasibleSpecError):
            generate(SynthSpec(n_concepts=8, dim=10)).validate()
        with pytest.raises(InfeasibleSpecError):
            SynthSpec(n_concepts=4, dim=16, margin=1.9).validate()

    def test_planted_outlier_count(self):
        spec = SynthSpec(seed=0, n_concepts=4, dim=16, samples_per_concept=130,
                         misalignment_rate=30.0 / 130.0)
        world = generate(spec)
        assert len(world.outliers) == 4 * 30

    def test_margin_forces_outlier_ordering(self):
        spec = SynthSpec(seed=9, n_concepts=4, dim=16, samples_per_concept=50,
                         noise_radius=0.05, misalignment_rate=0.2)
        world = generate(spec)
        pairs, vis = _pairs_and_vis(world)
        outlier_keys = {(i, s, p) for i, s, p in world.outliers}
        for group in group_by_root(pairs, vis):
            flags = [
                (pairs[m].image_id, pairs[m].segment_index, pairs[m].phrase) in outlier_keys
                for m in group.members
            ]
            if not any(flags):
                continue
            worst_inlier = min(
                s for s, f in zip(group.intra_scores, flags) if not f
            )
            best_outlier = max(s for s, f in zip(group.intra_scores, flags) if f)
            assert best_outlier < worst_inlier

    def test_nearest_center_recovers_truth(self):
        spec = SynthSpec(seed=11, n_concepts=5, dim=16, samples_per_concept=20,
                         noise_radius=0.1, misalignment_rate=0.3)
        world = generate(spec)
        centers = world.vis_centers
        for (img, seg), concept in world.truth_concepts.items():
            row = world.vis_embeddings[img].data[seg].astype(np.float64)
            assert int(np.argmax(centers @ row)) == concept

    def test_filter_recovers_all_outliers(self):
        spec = SynthSpec(seed=3, n_concepts=4, dim=16, samples_per_concept=130,
                         noise_radius=0.05, misalignment_rate=30.0 / 130.0)
        world = generate(spec)
        pairs, vis = _pairs_and_vis(world)
        outlier_keys = {(i, s, p) for i, s, p in world.outliers}
        strategy = FilterStrategy(StrategyKind.GROUP_INTRA_MODAL, 30.0)
        dropped_all = set()
        for group in group_by_root(pairs, vis):
            kept, dropped = filter_group(group, strategy)
            assert len(dropped) == 39  # floor(0.3 * 130)
            dropped_all.update(
                (pairs[m].image_id, pairs[m].segment_index, pairs[m].phrase) for m in dropped
            )
        assert outlier_keys <= dropped_all

    def test_lexicon_covers_phrases_roots_templates(self):
        from segref.retrieval import compose_prompts

        spec = SynthSpec(seed=2, n_concepts=3, dim=12, samples_per_concept=5,
                         ambient_rate=0.5, alias_rate=0.4)
        world = generate(spec)
        for bundle in world.bundles:
            for phrase in bundle.phrases:
                assert phrase in world.lexicon
        for concept in world.concepts:
            assert concept.name in world.lexicon
            assert concept.alias in world.lexicon
        for name in world.class_names:
            for prompt in compose_prompts(name):
                assert prompt in world.lexicon

    def test_test_images_are_valid_partitions(self):
        spec = SynthSpec(seed=6, n_concepts=3, dim=12, samples_per_concept=4,
                         n_test_images=4, test_image_size=16)
        world = generate(spec)
        assert len(world.test_images) == 4
        for timg in world.test_images:
            assert timg.masks.k == 4
            assert timg.gt.shape == (16, 16)
            assert set(np.unique(timg.masks.partition)) == {0, 1, 2, 3}
            for seg, concept in enumerate(timg.segment_concepts):
                assert (timg.gt[timg.masks.partition == seg] == concept).all()
