"""Initial segment-label pairing.

Per-image noun phrases are matched to class-agnostic segments through cosine
similarity in a shared embedding space: every phrase is assigned to its
top-matching segment, and segments matched by no phrase are dropped. Phrase
extraction is a best-effort heuristic chunker; ingest files may carry
pre-extracted phrases instead, which is the recommended path.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .core import EmbeddingMatrix, cosine_sim
from .errors import DimMismatchError, InvalidInputError, NoRootError
from .wordlists import DETERMINERS, FUNCTION_WORDS, VERB_FORMS

_TOKEN_RE = re.compile(r"[a-z]+(?:['-][a-z]+)*")
_ALPHA_RE = re.compile(r"[^a-zA-Z]")


@dataclass(frozen=True)
class PairRecord:
    """One matched segment-phrase pair.

    ``cross_modal_score`` is the cosine of the paired embeddings at pairing
    time. ``source`` distinguishes original pairs from synonym-enriched ones.
    """

    image_id: str
    segment_index: int
    phrase: str
    root: str
    cross_modal_score: float
    source: str = "paired"


@dataclass
class ImageBundle:
    """Per-image pairing input: segment and phrase embeddings in one space."""

    image_id: str
    segment_embeddings: EmbeddingMatrix
    phrases: list[str] = field(default_factory=list)
    phrase_embeddings: EmbeddingMatrix | None = None

    def __post_init__(self):
        if self.segment_embeddings.rows < 1:
            raise InvalidInputError(f"{self.image_id}: bundle needs at least one segment")
        n = len(self.phrases)
        emb = self.phrase_embeddings
        if emb is None:
            if n:
                raise InvalidInputError(f"{self.image_id}: phrases without embeddings")
        else:
            if emb.rows != n:
                raise InvalidInputError(
                    f"{self.image_id}: {n} phrases but {emb.rows} phrase embeddings"
                )
            if emb.dim != self.segment_embeddings.dim:
                raise DimMismatchError(
                    f"{self.image_id}: phrase dim {emb.dim} != segment dim "
                    f"{self.segment_embeddings.dim}"
                )


def extract_noun_phrases(description: str) -> list[str]:
    """Chunk a description into noun phrases (nouns with their modifiers).

    A phrase is an optional determiner followed by a run of content tokens;
    function words, verbs, digits and punctuation end the current phrase.
    Output is lowercase, ordered by first occurrence, deduplicated. An empty
    result is permitted.
    """
    phrases: list[str] = []
    seen: set[str] = set()
    current: list[str] = []

    def flush() -> None:
        if current and any(tok not in DETERMINERS for tok in current):
            phrase = " ".join(current)
            if phrase not in seen:
                seen.add(phrase)
                phrases.append(phrase)
        current.clear()

    for fragment in re.split(r"[^a-z'\- ]+", description.lower()):
        for raw in fragment.split():
            tok = raw.strip("'-")
            if not tok or not _TOKEN_RE.fullmatch(tok):
                flush()
            elif tok in FUNCTION_WORDS or tok in VERB_FORMS:
                flush()
            elif tok in DETERMINERS:
                flush()
                current.append(tok)
            else:
                current.append(tok)
        flush()
    return phrases


def root_of_phrase(phrase: str) -> str:
    """Lowercase head noun of a phrase.

    The head is the final alphabetic token (punctuation stripped), with
    rule-based plural de-suffixing: ``-ies`` -> ``-y``, trailing ``-s``
    dropped unless the token ends in ``-ss``. A multiword head like
    "traffic light" therefore reduces to "light" (documented limitation).

    Raises:
        NoRootError: no alphabetic token remains.
    """
    tokens = [_ALPHA_RE.sub("", part).lower() for part in phrase.split()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise NoRootError(f"no alphabetic token in phrase {phrase!r}")
    head = tokens[-1]
    if len(head) >= 4 and head.endswith("ies"):
        return head[:-3] + "y"
    if len(head) >= 2 and head.endswith("s") and not head.endswith("ss"):
        return head[:-1]
    return head


def pair_labels_to_segments(bundle: ImageBundle) -> list[PairRecord]:
    """Assign every phrase to its most similar segment.

    For phrase ``j`` the chosen segment is ``argmax_i sim[i][j]`` with ties
    resolved to the lowest segment index. Segments matched by no phrase emit
    nothing. Output order follows the bundle's phrase order.
    """
    if not bundle.phrases:
        return []
    sim = cosine_sim(bundle.segment_embeddings, bundle.phrase_embeddings)
    # np.argmax returns the first (lowest-index) maximum per column.
    best = np.argmax(sim.values, axis=0)
    records = []
    for j, phrase in enumerate(bundle.phrases):
        i = int(best[j])
        records.append(
            PairRecord(
                image_id=bundle.image_id,
                segment_index=i,
                phrase=phrase,
                root=root_of_phrase(phrase),
                cross_modal_score=float(sim.values[i, j]),
            )
        )
    return records
