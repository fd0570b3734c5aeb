"""Deterministic synthetic embedding worlds for tests and acceptance runs.

The generator plants a clustered structure: orthonormal concept centers in
three spaces (a shared pairing space, a visual space, a text space), segment
and phrase embeddings sampled around them, a controlled fraction of
misaligned pairs (the phrase names concept A while the segment's features
come from concept B), optional ungrounded "ambient" labels attached across
many images, and per-concept cross-modal score noise. Every concept has an
alias root whose text center sits at a fixed cosine from the primary's, so
synonym mining has true pairs to find.

All randomness flows from numpy's PCG64 generator seeded by the spec, so
identical specs produce byte-identical worlds.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmbeddingMatrix
from .enhance import _substitute_root
from .errors import InfeasibleSpecError, InvalidConfigError
from .formats import (
    TextLexicon,
    save_lexicon,
    write_assignments,
    write_embeddings,
    write_json,
    write_jsonl,
    write_mask_raster,
)
from .pairing import ImageBundle, root_of_phrase
from .segmenter import SegmentMaskSet

# (primary root, alias root) bank; a spec may use at most this many concepts.
NOUN_BANK = (
    ("cat", "kitten"),
    ("dog", "puppy"),
    ("car", "auto"),
    ("tree", "pine"),
    ("boat", "ship"),
    ("bird", "fowl"),
    ("horse", "pony"),
    ("chair", "seat"),
    ("lamp", "lantern"),
    ("house", "home"),
    ("cup", "mug"),
    ("phone", "handset"),
    ("bear", "cub"),
    ("apple", "fruit"),
    ("plane", "jet"),
    ("fish", "trout"),
)

MODIFIERS = ("small", "big", "fluffy", "shiny", "old", "young", "bright", "dark")

# Ungrounded catch-all roots attached across many images when ambient_rate > 0.
AMBIENT_ROOTS = ("background", "scene")


@dataclass
class SynthSpec:
    """Parameters of a synthetic world.

    ``margin`` is the guaranteed minimum Euclidean distance between concept
    centers (orthonormal placement yields sqrt(2)); with
    ``margin > 2 * noise_radius`` the intra-score ordering of planted
    outliers below all inliers is deterministic, not statistical.
    """

    seed: int = 0
    n_concepts: int = 6
    dim: int = 16
    samples_per_concept: int = 40
    noise_radius: float = 0.05
    misalignment_rate: float = 0.2
    margin: float = 1.0
    # Cross-modal score noise: per-concept phrase noise in the pairing space
    # is drawn uniformly from this range; segments get the fixed sigma.
    phrase_joint_noise: tuple[float, float] = (0.25, 0.75)
    segment_joint_noise: float = 0.25
    # Per-concept score calibration: both sides of a pair share a component
    # along a concept-specific direction with magnitude drawn from
    # [0, cross_modal_bias], shifting whole groups' score distributions.
    cross_modal_bias: float = 0.0
    # Probability that an image also carries an ungrounded ambient label.
    ambient_rate: float = 0.0
    # Fraction of phrases built on the concept's alias root instead of the
    # primary root (gives synonym mining true pairs inside the data).
    alias_rate: float = 0.0
    # Cosine between a primary root's text center and its alias's.
    alias_similarity: float = 0.8
    phrase_text_noise: float = 0.02
    n_test_images: int = 6
    test_image_size: int = 24

    def validate(self) -> None:
        c = self.n_concepts
        if c < 1:
            raise InvalidConfigError("need at least one concept")
        if c > len(NOUN_BANK):
            raise InfeasibleSpecError(f"at most {len(NOUN_BANK)} concepts supported")
        needed = 2 * c + len(AMBIENT_ROOTS)
        if needed > self.dim:
            raise InfeasibleSpecError(
                f"{c} concepts (plus aliases and ambient roots) need dim >= {needed}, "
                f"got {self.dim}"
            )
        if self.margin > math.sqrt(2.0) + 1e-9:
            raise InfeasibleSpecError(
                "orthonormal centers cannot guarantee a margin above sqrt(2)"
            )
        if not 0.0 <= self.misalignment_rate <= 1.0:
            raise InvalidConfigError("misalignment_rate must be in [0, 1]")
        if self.samples_per_concept < 1:
            raise InvalidConfigError("samples_per_concept must be >= 1")
        if self.test_image_size < 6:
            raise InvalidConfigError("test_image_size must be >= 6 (four nonempty quadrants)")


@dataclass(frozen=True)
class ConceptInfo:
    index: int
    name: str
    alias: str


@dataclass
class TestImage:
    image_id: str
    masks: SegmentMaskSet
    segment_concepts: list[int]
    segment_embeddings: EmbeddingMatrix  # visual space, k x d
    gt: np.ndarray                       # (h, w) uint32 class raster


@dataclass
class SynthWorld:
    spec: SynthSpec
    concepts: list[ConceptInfo]
    bundles: list[ImageBundle]                     # pairing-space inputs
    vis_embeddings: dict[str, EmbeddingMatrix]     # visual-space, per image
    truth_concepts: dict[tuple[str, int], int]     # (image_id, seg) -> concept
    outliers: list[tuple[str, int, str]]           # (image_id, seg, phrase)
    lexicon: TextLexicon
    class_names: list[str]
    test_images: list[TestImage]
    fingerprints: dict[str, str]
    vis_centers: np.ndarray | None = None          # planted c x d visual centers

    def root_vectors(self) -> dict[str, np.ndarray]:
        roots = set()
        for concept in self.concepts:
            roots.add(concept.name)
            roots.add(concept.alias)
        roots.update(AMBIENT_ROOTS)
        return {r: self.lexicon[r] for r in roots if r in self.lexicon}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _phrase_rng(seed: int, phrase: str) -> np.random.Generator:
    digest = hashlib.blake2b(phrase.encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))
    )


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q.T[:count]


def generate(spec: SynthSpec) -> SynthWorld:
    """Build a synthetic world; identical specs yield identical worlds."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    c = spec.n_concepts
    d = spec.dim
    n_amb = len(AMBIENT_ROOTS)

    concepts = [
        ConceptInfo(index=i, name=NOUN_BANK[i][0], alias=NOUN_BANK[i][1]) for i in range(c)
    ]

    # Independent orthonormal center sets per space. The pairing space
    # reserves extra directions for the per-concept calibration bias; the
    # text space reserves extra directions to place alias centers at the
    # configured cosine.
    joint_rows = _orthonormal_rows(rng, 2 * c + n_amb, d)
    joint_centers = joint_rows[: c + n_amb]
    bias_dirs = joint_rows[c + n_amb :]
    bias_mag = rng.uniform(0.0, spec.cross_modal_bias, size=c)
    vis_centers = _orthonormal_rows(rng, c, d)
    text_rows = _orthonormal_rows(rng, 2 * c + n_amb, d)
    text_primary = text_rows[:c]
    text_spare = text_rows[c : 2 * c]
    text_ambient = text_rows[2 * c :]
    sin = math.sqrt(max(0.0, 1.0 - spec.alias_similarity**2))
    text_alias = spec.alias_similarity * text_primary + sin * text_spare

    root_center = {}
    for concept in concepts:
        root_center[concept.name] = text_primary[concept.index]
        root_center[concept.alias] = text_alias[concept.index]
    for j, amb in enumerate(AMBIENT_ROOTS):
        root_center[amb] = text_ambient[j]

    phrase_sigma = rng.uniform(*spec.phrase_joint_noise, size=c + n_amb)

    def joint_noise(sigma: float) -> np.ndarray:
        return sigma * rng.normal(size=d) / math.sqrt(d)

    def bounded_noise(radius: float) -> np.ndarray:
        g = rng.normal(size=d)
        return radius * rng.uniform() * g / np.linalg.norm(g)

    bundles: list[ImageBundle] = []
    vis_embeddings: dict[str, EmbeddingMatrix] = {}
    truth: dict[tuple[str, int], int] = {}
    outliers: list[tuple[str, int, str]] = []
    base_phrases: set[str] = set()
    image_ids: list[str] = []

    n_out = int(round(spec.misalignment_rate * spec.samples_per_concept))
    n_alias = int(round(spec.alias_rate * spec.samples_per_concept))
    counter = 0
    for concept in concepts:
        flags = np.zeros(spec.samples_per_concept, dtype=bool)
        flags[rng.permutation(spec.samples_per_concept)[:n_out]] = True
        alias_flags = np.zeros(spec.samples_per_concept, dtype=bool)
        alias_flags[rng.permutation(spec.samples_per_concept)[:n_alias]] = True
        for sample in range(spec.samples_per_concept):
            image_id = f"ref{counter:05d}"
            counter += 1
            image_ids.append(image_id)

            if flags[sample] and c > 1:
                other = int(rng.integers(c - 1))
                vis_concept = other + (other >= concept.index)
            else:
                vis_concept = concept.index

            root = concept.alias if alias_flags[sample] else concept.name
            modifier = MODIFIERS[int(rng.integers(len(MODIFIERS)))]
            phrase = f"a {modifier} {root}"
            base_phrases.add(phrase)

            phrases = [phrase]
            label_concepts = [concept.index]
            if spec.ambient_rate > 0:
                for j, amb in enumerate(AMBIENT_ROOTS):
                    if rng.uniform() < spec.ambient_rate * (1.0 - 0.45 * j):
                        amb_phrase = f"the {amb}"
                        phrases.append(amb_phrase)
                        label_concepts.append(c + j)
                        base_phrases.add(amb_phrase)

            bias = bias_mag[concept.index] * bias_dirs[concept.index]
            seg_joint = _unit(
                joint_centers[vis_concept] + bias + joint_noise(spec.segment_joint_noise)
            )
            phrase_rows = [
                _unit(
                    joint_centers[lc]
                    + (bias if lc == concept.index else 0.0)
                    + joint_noise(float(phrase_sigma[lc]))
                )
                for lc in label_concepts
            ]
            bundles.append(
                ImageBundle(
                    image_id=image_id,
                    segment_embeddings=EmbeddingMatrix.from_rows([seg_joint], normalized=True),
                    phrases=phrases,
                    phrase_embeddings=EmbeddingMatrix.from_rows(phrase_rows, normalized=True),
                )
            )
            vis = _unit(vis_centers[vis_concept] + bounded_noise(spec.noise_radius))
            vis_embeddings[image_id] = EmbeddingMatrix.from_rows([vis], normalized=True)
            truth[(image_id, 0)] = vis_concept
            if vis_concept != concept.index:
                outliers.append((image_id, 0, phrase))

    # Text lexicon: roots, base phrases, every root substitution of every
    # base phrase (covers any enrichment outcome), and the class templates.
    all_roots = sorted(root_center)
    terms: dict[str, np.ndarray] = {}
    for root in all_roots:
        terms[root] = root_center[root].astype(np.float64)

    def phrase_vector(phrase: str) -> np.ndarray:
        center = root_center[root_of_phrase(phrase)]
        prng = _phrase_rng(spec.seed, phrase)
        noise = spec.phrase_text_noise * prng.normal(size=d) / math.sqrt(d)
        return _unit(center + noise)

    for phrase in sorted(base_phrases):
        terms.setdefault(phrase, phrase_vector(phrase))
        for root in all_roots:
            variant = _substitute_root(phrase, root)
            terms.setdefault(variant, phrase_vector(variant))

    from .retrieval import compose_prompts  # deferred: retrieval imports segmenter

    class_names = [
        concepts[i].alias if i % 2 == 1 else concepts[i].name for i in range(c)
    ]
    for name in sorted({cc.name for cc in concepts} | {cc.alias for cc in concepts}):
        for prompt in compose_prompts(name):
            prng = _phrase_rng(spec.seed, prompt)
            noise = 0.01 * prng.normal(size=d) / math.sqrt(d)
            terms.setdefault(prompt, _unit(root_center[name] + noise))

    term_list = sorted(terms)
    lexicon = TextLexicon(
        terms=term_list,
        matrix=EmbeddingMatrix.from_rows([terms[t] for t in term_list], normalized=True),
    )

    # Test images: four-rectangle partitions with per-segment concepts.
    test_images = []
    size = spec.test_image_size
    for t in range(spec.n_test_images):
        image_id = f"test{t:03d}"
        split_y = int(rng.integers(size // 3, 2 * size // 3))
        split_x = int(rng.integers(size // 3, 2 * size // 3))
        partition = np.zeros((size, size), dtype=np.uint32)
        partition[:split_y, split_x:] = 1
        partition[split_y:, :split_x] = 2
        partition[split_y:, split_x:] = 3
        seg_concepts = [int(rng.integers(c)) for _ in range(4)]
        rows = [
            _unit(vis_centers[sc] + bounded_noise(spec.noise_radius)) for sc in seg_concepts
        ]
        gt = np.zeros((size, size), dtype=np.uint32)
        for seg, sc in enumerate(seg_concepts):
            gt[partition == seg] = sc
        test_images.append(
            TestImage(
                image_id=image_id,
                masks=SegmentMaskSet.from_partition(partition, k=4),
                segment_concepts=seg_concepts,
                segment_embeddings=EmbeddingMatrix.from_rows(rows, normalized=True),
                gt=gt,
            )
        )

    fingerprints = {
        "pair": f"synth-pair:v1:seed={spec.seed}",
        "visual": f"synth-vis:v1:seed={spec.seed}",
        "text": f"synth-text:v1:seed={spec.seed}",
    }
    return SynthWorld(
        spec=spec,
        concepts=concepts,
        bundles=bundles,
        vis_embeddings=vis_embeddings,
        truth_concepts=truth,
        outliers=outliers,
        lexicon=lexicon,
        class_names=class_names,
        test_images=test_images,
        fingerprints=fingerprints,
        vis_centers=vis_centers.copy(),
    )


def write_world(world: SynthWorld, out_dir: str | Path) -> None:
    """Serialize a world into ingest/, test/, and truth/ directories."""
    out_dir = Path(out_dir)
    ingest = out_dir / "ingest"
    (ingest / "embeddings").mkdir(parents=True, exist_ok=True)

    image_ids = [b.image_id for b in world.bundles]
    write_json(
        ingest / "manifest.json",
        {
            "format_version": 1,
            "images": image_ids,
            "dims": {
                "pair": world.spec.dim,
                "visual": world.spec.dim,
                "text": world.spec.dim,
            },
            "encoders": world.fingerprints,
        },
    )
    write_jsonl(
        ingest / "phrases.jsonl",
        [{"image_id": b.image_id, "phrases": b.phrases} for b in world.bundles],
    )
    write_jsonl(
        ingest / "descriptions.jsonl",
        [
            {
                "image_id": b.image_id,
                "description": "the image shows " + " and ".join(b.phrases) + ".",
            }
            for b in world.bundles
        ],
    )
    for bundle in world.bundles:
        stem = ingest / "embeddings" / bundle.image_id
        write_embeddings(Path(f"{stem}.seg.emb"), bundle.segment_embeddings)
        write_embeddings(Path(f"{stem}.phr.emb"), bundle.phrase_embeddings)
        write_embeddings(Path(f"{stem}.vis.emb"), world.vis_embeddings[bundle.image_id])
    save_lexicon(ingest / "text_lexicon", world.lexicon)

    test = out_dir / "test"
    for sub in ("embeddings", "masks", "gt"):
        (test / sub).mkdir(parents=True, exist_ok=True)
    write_json(
        test / "manifest.json",
        {
            "format_version": 1,
            "images": [t.image_id for t in world.test_images],
            "encoders": {
                "visual": world.fingerprints["visual"],
                "text": world.fingerprints["text"],
            },
        },
    )
    (test / "classes.txt").write_text("\n".join(world.class_names) + "\n", "utf-8")
    save_lexicon(test / "text_lexicon", world.lexicon)
    for timg in world.test_images:
        write_embeddings(test / "embeddings" / f"{timg.image_id}.emb", timg.segment_embeddings)
        write_mask_raster(test / "masks" / f"{timg.image_id}.msk", timg.masks.partition, timg.masks.k)
        write_mask_raster(test / "gt" / f"{timg.image_id}.msk", timg.gt, len(world.class_names))

    truth = out_dir / "truth"
    truth.mkdir(parents=True, exist_ok=True)
    rows = np.arange(len(image_ids), dtype=np.int64)
    cols = np.array(
        [world.truth_concepts[(img, 0)] for img in image_ids], dtype=np.int64
    )
    write_assignments(
        truth / "assignment.asg", len(image_ids), world.spec.n_concepts, rows, cols
    )
    write_json(
        truth / "outliers.json",
        {
            "outliers": [
                {"image_id": img, "segment_index": seg, "phrase": phrase}
                for img, seg, phrase in world.outliers
            ]
        },
    )
    write_json(
        truth / "concepts.json",
        {
            "concepts": [
                {"index": cc.index, "name": cc.name, "alias": cc.alias}
                for cc in world.concepts
            ],
            "class_names": world.class_names,
        },
    )
