"""Typed error hierarchy.

Every failure surfaced by the engine is a subclass of :class:`SegrefError` so
that callers (and the CLI) can distinguish engine errors from genuine bugs.
File readers in particular must never crash on malformed input: they raise a
:class:`FormatError` subclass instead.
"""


class SegrefError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(SegrefError):
    """An argument violates a documented precondition."""


class InvalidConfigError(SegrefError):
    """A configuration value is out of its allowed range."""


# --- numeric kernels -------------------------------------------------------

class ZeroRowError(SegrefError):
    """A row with (near-)zero norm cannot be L2-normalized."""

    def __init__(self, index: int):
        super().__init__(f"row {index} has norm <= 1e-12 and cannot be normalized")
        self.index = index


class DimMismatchError(SegrefError):
    """Operands disagree on embedding dimension or inner shape."""


class NotNormalizedError(SegrefError):
    """An operation requires L2-normalized inputs."""


class NonPositiveTemperatureError(SegrefError):
    """Softmax temperature must be > 0."""


class EmptyInputError(SegrefError):
    """An operation received zero rows/items where at least one is required."""


class ZeroMedianError(SegrefError):
    """The coordinate-wise median collapsed to a (near-)zero vector."""


class ZeroMeanError(SegrefError):
    """An averaged embedding collapsed to a (near-)zero vector."""


# --- pairing / enhancement -------------------------------------------------

class NoRootError(SegrefError):
    """A phrase contains no alphabetic token to use as its root."""


class MissingCrossModalScoresError(SegrefError):
    """A cross-modal filter strategy needs scores that are not present."""


class TooFewGroupsError(SegrefError):
    """Knee detection needs at least three distinct label groups."""


class OrphanSegmentError(SegrefError):
    """A reference segment would carry no label."""


class OrphanLabelError(SegrefError):
    """A reference label would apply to no segment."""


class LexiconMissError(SegrefError):
    """One or more terms are absent from the text lexicon."""

    def __init__(self, terms):
        self.terms = sorted(terms)
        preview = ", ".join(repr(t) for t in self.terms[:5])
        more = "" if len(self.terms) <= 5 else f" (+{len(self.terms) - 5} more)"
        super().__init__(f"lexicon is missing {len(self.terms)} term(s): {preview}{more}")


# --- pooling / rasters -----------------------------------------------------

class EmptyMaskError(SegrefError):
    """A mask has (near-)zero area after downscaling."""


class ShapeMismatchError(SegrefError):
    """Raster or matrix shapes disagree."""


class ClassOutOfRangeError(SegrefError):
    """A class/segment id is >= the declared count and not the ignore sentinel."""


class NoEvaluatedClassesError(SegrefError):
    """Every class had an empty IoU denominator; the mean is undefined."""


# --- binary formats --------------------------------------------------------

class FormatError(SegrefError):
    """Base class for malformed-file errors."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class TruncatedError(FormatError):
    """File length disagrees with what the header promises (short or long)."""


class NonFiniteError(FormatError):
    """A float payload contains NaN or infinity."""


class EncodingError(FormatError):
    """Structurally invalid payload (bad run lengths, unsorted pairs, ...)."""


class ManifestMismatchError(FormatError):
    """A manifest disagrees with the files it describes."""


class OrphanRowOrColumnError(FormatError):
    """A persisted assignment matrix has an empty row or column."""


# --- synthetic data --------------------------------------------------------

class InfeasibleSpecError(SegrefError):
    """A synthetic-world spec cannot be realised (e.g. more concepts than dims)."""
