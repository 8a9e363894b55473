"""Exception types raised across the package."""


class SignedBarycenterError(Exception):
    """Base class for all errors raised by :mod:`signedbary`."""


class InputError(SignedBarycenterError, ValueError):
    """Malformed or inconsistent user input."""


class AffineSumViolation(InputError):
    pass


class ZeroWeight(InputError):
    pass


class NoPositiveWeight(InputError):
    pass


class OffGridSample(InputError):
    pass


class NegativeMass(InputError):
    pass


class EmptyInput(InputError):
    pass


class MeanOutsideDomain(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class SingularMarginal(InputError):
    """The designated base marginal is not a discrete absolutely-continuous proxy."""


class NotInvertible(SignedBarycenterError, ValueError):
    """Twist inversion has no solution inside the box."""


class DomainTooSmall(SignedBarycenterError):
    """Too much mass was clamped onto the box boundary by a transport map."""


class Diverged(SignedBarycenterError, ArithmeticError):
    pass


class MaxIters(SignedBarycenterError):
    pass


class OnePositiveWeight(SignedBarycenterError):
    """The dual solver needs two positive weights; use the oracle route instead."""


class OnePositiveWeightRequired(SignedBarycenterError, ValueError):
    pass


class EngineUnavailable(SignedBarycenterError):
    pass


class NotQuadraticCost(SignedBarycenterError, ValueError):
    pass


class TooManyAtoms(SignedBarycenterError, ValueError):
    pass


class DomainClampWarning(UserWarning):
    """Values outside the box were clamped onto its boundary."""
