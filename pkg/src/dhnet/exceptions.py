"""Exception hierarchy.

Every error raised by the package derives from :class:`DHNetError`; the CLI
prints the class name as the machine-readable error category.
"""


class DHNetError(Exception):
    """Base class for all package errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


# network topology
class NetworkError(DHNetError, ValueError):
    pass


class CycleError(NetworkError):
    pass


class NotATreeError(NetworkError):
    pass


class MultiplePlantsError(NetworkError):
    pass


class DanglingConsumerError(NetworkError):
    pass


class TopologyError(NetworkError):
    """Structural problem not covered by the more specific classes."""


class DomainError(DHNetError, ValueError):
    pass


class OutOfRangeError(DHNetError, ValueError):
    """A time series was evaluated outside its sampled range."""


# discretization
class SchemeError(DHNetError, ValueError):
    pass


class SizeError(SchemeError):
    pass


class UnknownOrderError(SchemeError):
    pass


# assembly
class DimensionError(DHNetError):
    pass


class SingularAlgebraicPart(DHNetError):
    pass


# consistent initialization
class InitError(DHNetError):
    pass


class NoConvergence(InitError):
    pass


class SingularKKT(InitError):
    pass


# time integration
class IntegrationError(DHNetError):
    pass


class NewtonDivergence(IntegrationError):
    pass


class SingularMatrixError(IntegrationError):
    pass


class StepUnderflow(IntegrationError):
    pass


class InconsistentStart(IntegrationError):
    pass


# verification
class OutOfHorizon(DHNetError, ValueError):
    pass


class LatticeMismatch(DHNetError, ValueError):
    pass


# file formats
class ParseError(DHNetError, ValueError):
    pass
