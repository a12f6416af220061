"""Exception hierarchy shared across the package.

Everything raised on purpose derives from QuantLensError so callers can
catch one base class at the CLI boundary and map it to an exit code.
"""


class QuantLensError(Exception):
    """Base class for all errors raised deliberately by this package."""


class InvalidInput(QuantLensError):
    """A value passed to a numeric routine violates its preconditions."""


class InvalidConfig(QuantLensError):
    """A config object, manifest, or plan is structurally unusable."""


class NumericalFailure(QuantLensError):
    """An iterative or factorization routine did not converge.

    ``iterations`` holds the iteration count when the backend reports one,
    else None.
    """

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DegenerateSample(QuantLensError):
    """A statistic is undefined on this sample (e.g. zero variance)."""


class CapacityExceeded(QuantLensError):
    """A generated artifact outgrew a hard size bound."""


class TokenizationError(QuantLensError):
    """A string has no id in the vocabulary being used."""


class InvalidPatch(QuantLensError):
    """A patch directive is out of bounds or conflicts with another."""


class TraceIncomplete(QuantLensError):
    """A trace is missing a field the caller asked to read."""


class TrainingFailure(QuantLensError):
    """Training diverged. ``step`` is the step at which loss went non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CorruptCheckpoint(QuantLensError):
    """A checkpoint file failed magic, bounds, or shape validation."""


class CorruptArchive(QuantLensError):
    """A trace archive file failed magic, bounds, or shape validation."""


class InsufficientSamples(QuantLensError):
    """Too few samples to compute the requested statistic honestly."""


class NotFound(QuantLensError):
    """A keyed lookup (prompt id, tensor name, stage output) found nothing."""


class AlignmentError(QuantLensError):
    """Two collections that must be paired element-wise do not line up."""


class StageFailure(QuantLensError):
    """A pipeline stage raised; carries the stage name for the exit line."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class LockHeld(QuantLensError):
    """Another live process owns the output directory."""
