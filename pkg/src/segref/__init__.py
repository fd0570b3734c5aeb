"""segref: segment-text reference sets and similarity-based retrieval.

Build a reference set of paired segment and label embeddings from raw
per-image ingest files, enhance it by group-based filtering and synonym
enriching, and assign class labels to the pixels of test images by similarity
retrieval against it.
"""

from .core import (
    EmbeddingMatrix,
    SimilarityMatrix,
    coordinatewise_median,
    cosine_sim,
    l2_normalize,
    softmax_rows,
)
from .enhance import (
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
from .errors import SegrefError
from .metrics import ConfusionMatrix, accumulate, miou
from .pairing import (
    ImageBundle,
    PairRecord,
    extract_noun_phrases,
    pair_labels_to_segments,
    root_of_phrase,
)
from .pooling import downscale_mask, mask_average_pool
from .retrieval import (
    PROMPT_TEMPLATES,
    PredictionMap,
    ReferenceSet,
    RetrievalConfig,
    affinity_a1,
    affinity_a2,
    aggregate_pixels,
    average_template_embeddings,
    build_reference_set,
    compose_prompts,
    segment_logits,
)
from .segmenter import IGNORE_ID, SegmentMaskSet, felzenszwalb_segment, gaussian_smooth
from .synth import SynthSpec, SynthWorld, generate

__version__ = "0.1.0"

__all__ = [
    "EmbeddingMatrix",
    "SimilarityMatrix",
    "l2_normalize",
    "cosine_sim",
    "softmax_rows",
    "coordinatewise_median",
    "PairRecord",
    "ImageBundle",
    "extract_noun_phrases",
    "root_of_phrase",
    "pair_labels_to_segments",
    "LabelGroup",
    "FilterStrategy",
    "StrategyKind",
    "SynonymTable",
    "group_by_root",
    "prune_ambiguous_labels",
    "filter_group",
    "build_synonym_table",
    "enrich_labels",
    "enhance_pairs",
    "ReferenceSet",
    "RetrievalConfig",
    "PredictionMap",
    "PROMPT_TEMPLATES",
    "build_reference_set",
    "compose_prompts",
    "average_template_embeddings",
    "affinity_a1",
    "affinity_a2",
    "segment_logits",
    "aggregate_pixels",
    "SegmentMaskSet",
    "IGNORE_ID",
    "gaussian_smooth",
    "felzenszwalb_segment",
    "downscale_mask",
    "mask_average_pool",
    "ConfusionMatrix",
    "accumulate",
    "miou",
    "SynthSpec",
    "SynthWorld",
    "generate",
    "SegrefError",
    "__version__",
]
