"""Exception hierarchy shared across the pipeline.

Each class maps to a documented CLI exit code (see README).
"""


class ProlifscoreError(Exception):
    """Base class for all errors raised by this package."""


class SlideFormatError(ProlifscoreError):
    """Manifest missing/malformed, tile missing, or tile dimensions disagree."""


class RegionError(ProlifscoreError):
    """Invalid region request (bad level, zero-area rectangle)."""


class DegenerateHistogramError(ProlifscoreError):
    """Histogram has all its mass in a single bin; no threshold exists."""


class StainEstimationError(ProlifscoreError):
    """Stain matrix could not be estimated from the given pixels."""


class TooFewStainPixelsError(StainEstimationError):
    """Not enough non-transparent pixels survive the beta filter."""


class DegenerateStainError(StainEstimationError):
    """OD cloud is rank deficient (effectively a single stain)."""


class ConfigError(ProlifscoreError):
    """Pipeline configuration is invalid or contains unknown keys."""


class ModelError(ProlifscoreError):
    """SVM training/prediction contract violation (bad labels, dim mismatch)."""


class PipelineStageError(ProlifscoreError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
