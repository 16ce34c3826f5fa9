"""Exception hierarchy.

Two families matter to callers: :class:`DataError` for inputs that violate a
contract (bad CSV rows, degenerate statistics, malformed model files) and
:class:`NumericalError` for failures of the numerical machinery itself. The
command line maps the first to exit code 2 and the second to exit code 3.
"""


class VolharmError(Exception):
    """Base class for every error raised by this package."""


class DataError(VolharmError, ValueError):
    """Input data violates a documented precondition."""


class NumericalError(VolharmError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


# descriptors
class ZeroVariancePair(DataError):
    pass


class EmptyHistogram(DataError):
    pass


class LengthMismatch(DataError):
    pass


class SingularMatrix(DataError):
    pass


class ReflectionNotSupported(DataError):
    pass


class NonFiniteInput(DataError):
    pass


# detrend
class TooFewSamples(DataError):
    pass


class DegenerateAges(DataError):
    pass


# rvm
class DimensionMismatch(DataError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class AllWeightsPruned(NumericalError):
    pass


class NoConvergence(NumericalError):
    """Training hit ``max_iter``; the last state is kept on ``.model``."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


class ConvergenceWarning(RuntimeWarning):
    """Training stopped at ``max_iter`` before the hyperparameters settled."""


# harmonize
class TooFewSubjects(DataError):
    pass


class MissingAge(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class SchemaVersionMismatch(DataError):
    pass


# evaluate
class NoEligibleScanners(DataError):
    pass


class IncompleteDesign(DataError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class DegenerateDifferences(DataError):
    pass


# synth
class InvalidSpec(DataError):
    pass
