"""Exception types raised by the drift laboratory."""
from typing import Optional


class DriftLabError(Exception):
    """Base class for every failure the library raises on purpose."""


class DimensionMismatchError(DriftLabError):
    pass


class KernelDomainError(DriftLabError):
    """Evaluation at a point where the kernel (or a field built on it) is not differentiable."""


class UnsupportedFamilyError(DriftLabError):
    pass


class UnsupportedCombinationError(DriftLabError):
    pass


class UnsupportedDimensionError(DriftLabError):
    pass


class SingularDenominatorError(DriftLabError):
    """
    A kernel density denominator underflowed.

    particle is the index of the offending evaluation point, which is the
    particle index whenever the field is evaluated at the particles.
    """

    def __init__(self, message: str, particle: Optional[int] = None):
        super().__init__(message)
        self.particle = particle


class DegenerateConfigError(DriftLabError):
    pass


class CollisionGuardError(DriftLabError):
    """Two particles came closer than the collision guard."""

    def __init__(self, message: str, pair: Optional[tuple] = None):
        super().__init__(message)
        self.pair = pair
        self.particle = pair[0] if pair else None


class NonFiniteError(DriftLabError):
    pass


class OrderingError(DriftLabError):
    pass


class RegimeError(DriftLabError):
    pass


class AssignmentError(DriftLabError):
    pass


class InvariantViolation(DriftLabError):
    """A quantity that holds for every configuration came out false, such as R_N above its self-bound."""


class ConfigError(DriftLabError):
    pass


class IntegrationAbort(DriftLabError):
    """A step failed mid-run; keeps the failing time and particle."""

    def __init__(self, message: str, time: float, particle: Optional[int] = None,
                 cause: Optional[Exception] = None):
        super().__init__(message)
        self.time = time
        self.particle = particle
        self.cause = cause

    def to_dict(self) -> dict:
        return {
            'type': type(self.cause).__name__ if self.cause is not None else type(self).__name__,
            'message': str(self),
            'time': self.time,
            'particle': self.particle,
        }
