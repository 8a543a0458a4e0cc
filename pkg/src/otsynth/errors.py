"""Exception hierarchy shared by all otsynth modules.

Two families matter to callers: ``DataError`` covers malformed inputs,
files, and shape problems; ``NumericError`` covers mathematically
degenerate inputs that no amount of reformatting would fix. The CLI maps
the families to distinct exit codes.
"""


class OTSynthError(Exception):
    """Base class for all errors raised by this package."""


class DataError(OTSynthError):
    """Malformed input data, files, shapes, or labels."""


class NumericError(OTSynthError):
    """Mathematically degenerate input (zero norms, non-finite costs, ...)."""


# --- numeric family ---------------------------------------------------------

class ZeroNormVector(NumericError):
    """A vector that must have positive L2 norm has norm zero."""


class NonFiniteCost(NumericError):
    """Cost matrix contains NaN or infinite entries."""


class DegenerateMarginal(NumericError):
    """A marginal distribution has zero total mass."""


# --- data family ------------------------------------------------------------

class ShapeMismatch(DataError):
    """Operands have incompatible shapes."""


class DimensionMismatch(DataError):
    """Feature dimension disagrees with the declared dimension."""


class LabelOutOfRange(DataError):
    """Class label does not index a valid row/entry."""


class InstanceTooLarge(DataError):
    """Problem size exceeds the limit of a test-scale solver."""


class EmptyInput(DataError):
    """An operation that needs at least one element got none."""


class AllEmpty(DataError):
    """Every cluster is empty; no mass distribution can be formed."""


class EmptyInitClass(DataError):
    """A per-class initialisation list contains no features."""


class StaleCache(DataError):
    """A backward pass was given a cache from different parameters."""


class InsufficientData(DataError):
    """Training set does not meet the minimum class/sample counts."""


class MissingNovelClasses(DataError):
    """A declared novel class has no shots in the fine-tuning set."""


class NotEnoughSamples(DataError):
    """A class has fewer samples than the requested shot count."""


class UnknownClassInTestSet(DataError):
    """Test set contains a class the classifier has no row for."""


class FormatError(DataError):
    """A feature file is corrupt; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None
                         else f"{message} (byte offset {offset})")
        self.offset = offset
