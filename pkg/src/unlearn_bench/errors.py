"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid architecture, option, argument, or config-file contents."""


class TestSpecError(ValueError):
    """Deletion-test spec is incompatible with the dataset."""

    __test__ = False  # "Test" prefix is domain language, not a pytest class


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss). Carries the failing epoch."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class EvaluationError(ValueError):
    """A metric was asked to evaluate an empty or degenerate sample set."""


class AggregationError(ValueError):
    """Run records with mismatched shapes cannot be aggregated."""


class IdxFormatError(ValueError):
    """Malformed IDX file. Carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalStabilityError(ArithmeticError):
    """Floating-point evaluation would be unreliable; use the exact path."""


class DeletionSetAccessError(RuntimeError):
    """An audited data view was asked for deletion-set rows."""
