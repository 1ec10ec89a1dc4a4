"""Exception types raised across the package."""


class AmoeError(Exception):
    """Base class for all errors raised by this package."""


class CholeskyFailure(AmoeError, ValueError):
    """A covariance matrix could not be factorised, even after jitter."""


class DegenerateAncestors(AmoeError):
    """Every ancestor has zero selection weight."""


class AbsoluteContinuityViolation(AmoeError):
    """The proposal density vanishes where the target kernel does not."""


class DegenerateNormalizer(AmoeError):
    """The normalising-constant iterate is not positive."""


class FilterCollapse(AmoeError):
    """All importance weights of a particle sample are zero."""


class InvalidObservation(AmoeError, ValueError):
    """An observation lies outside the support of the observation model."""


class UnreliableEstimate(UserWarning):
    """A Monte Carlo estimate rests on too few effective samples."""
