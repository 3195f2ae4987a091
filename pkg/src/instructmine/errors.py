"""Exception taxonomy for the retrieval engine.

Every failure mode the library raises deliberately derives from
:class:`EngineError`, so callers can catch one base class at process
boundaries (the CLI does exactly that).
"""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ZeroVectorError(EngineError, ValueError):
    """Vector norm is below the zero threshold and cannot be normalized."""


class DimensionMismatchError(EngineError, ValueError):
    """Two vectors (or a vector and an index/bundle) disagree on dimension."""


class DegenerateQueryError(EngineError, ValueError):
    """A fused query collapsed to (numerically) the zero vector."""


class InvalidRankError(EngineError, ValueError):
    """A rank position smaller than 1 was supplied."""


class EmptyGroupError(EngineError, ValueError):
    """A per-image patch-score group was empty."""


class EmptyInputError(EngineError, ValueError):
    """An operation that needs at least one record received none."""


class EmptyIndexError(EngineError, ValueError):
    """Search was attempted against an index with zero records."""


class InvalidConfigError(EngineError, ValueError):
    """A configuration value violates its documented constraints."""


class FormatVersionMismatchError(EngineError):
    """File magic or format version is not one this build understands."""


class ChecksumMismatchError(EngineError):
    """File payload fails its CRC32 check (corrupt or truncated)."""


class ParseError(EngineError):
    """An annotation or instruction file could not be parsed."""


class DanglingReferenceError(EngineError):
    """A record references an id that does not exist."""


class OutOfBoundsBBoxError(EngineError):
    """A bounding box is degenerate or extends outside its image."""


class MissingEmbeddingError(EngineError):
    """A required patch/bbox/prompt embedding is absent from the bundle."""


class TooFewImagesError(EngineError, ValueError):
    """Fewer images than folds requested."""


class ClassAbsentFromTrainSplitError(EngineError):
    """A class has zero instances in the training split."""


class ClassAbsentFromTestSplitError(EngineError):
    """A class has zero instances in the test split."""


class NoPositivesError(EngineError, ValueError):
    """Average precision is undefined without positive examples."""


class EmptyPoolError(EngineError, ValueError):
    """A candidate pool with no entries was supplied to selection."""


class PoolTooSmallError(EngineError, ValueError):
    """A sample larger than the pool was requested."""
