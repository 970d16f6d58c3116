"""Exception taxonomy.

Every failure mode the library promises to detect gets its own class so tests
and the CLI can tell them apart without string matching.
"""


class StagError(Exception):
    """Base class for all library-raised errors."""


class ShapeError(StagError):
    """Operand shapes are incompatible; message carries both shapes."""


class ValidationError(StagError):
    """Malformed input data (non-finite values, non-binary labels, bad config)."""


class DegenerateRowError(StagError):
    """Softmax row with every entry masked."""


class DegeneratePoolError(StagError):
    """Masked mean over a slice with zero unmasked entries."""


class ZeroNormError(StagError):
    """Cosine similarity against a zero-norm vector."""


class DegenerateRoiError(StagError):
    """RoI with no area left after clipping to the feature map."""


class CapacityError(StagError):
    """More boxes in a frame than the model's slot capacity."""


class DegenerateFrameError(StagError):
    """Frame with zero valid boxes where at least one is required."""


class MetricUndefinedError(StagError):
    """Metric has no defined value (e.g. mAP with no positive class)."""


class NumericalAbortError(StagError):
    """Non-finite loss or gradient; message names the offending tensor."""
