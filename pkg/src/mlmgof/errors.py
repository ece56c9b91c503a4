"""Exception hierarchy shared across the package."""


class MlmGofError(Exception):
    """Base class for all package errors."""


class DataError(MlmGofError):
    """Input data violates a dataset invariant."""


class NonBinaryOutcome(DataError):
    pass


class BrokenNesting(DataError):
    pass


class MissingValue(DataError):
    pass


class TooFewClusters(DataError):
    pass


class UnknownColumn(DataError):
    pass


class SpecError(MlmGofError):
    """Model specification is inconsistent."""


class EstimationError(MlmGofError):
    """Model fitting failed."""


class BadNodeCount(EstimationError, ValueError):
    pass


class NonFiniteLikelihood(EstimationError):
    pass


class SeparationDetected(EstimationError):
    pass


class SingularInformation(EstimationError):
    pass


class NoConvergence(EstimationError):
    pass


class ModeSearchFailure(EstimationError):
    pass


class TooFewObservations(MlmGofError):
    pass


class SingularCovariance(MlmGofError):
    pass


class BadIcc(ValueError, MlmGofError):
    pass
