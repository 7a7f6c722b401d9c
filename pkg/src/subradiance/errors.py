"""Exception hierarchy shared by the solvers and the experiment harness."""


class SubradianceError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(SubradianceError, ValueError):
    """Invalid emitter geometry (non-positive spacing, coincident atoms, ...)."""


class DomainError(SubradianceError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class CapacityError(SubradianceError):
    """The requested system size exceeds what a backend supports."""


class UnsupportedStateError(SubradianceError, TypeError):
    """A state representation cannot be used with the requested backend."""


class IntegrationError(SubradianceError, RuntimeError):
    """The ODE integrator failed; ``time`` records where it stopped."""

    def __init__(self, message, time=None):
        super().__init__(message if time is None else f"{message} (t = {time:.6g})")
        self.time = time


class ConsistencyError(SubradianceError, RuntimeError):
    """An internal algebraic invariant was violated."""


class ConfigError(SubradianceError, ValueError):
    """Run configuration failed validation; ``path`` locates the offending key."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
