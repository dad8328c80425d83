"""Exception hierarchy shared by every subpackage."""


class PLIError(Exception):
    """Base class for all errors raised by pli_lab."""


class ConfigurationError(PLIError, ValueError):
    """Invalid configuration or incompatible shapes."""


class DomainError(PLIError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StateError(PLIError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class NonFiniteError(PLIError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class CorpusError(PLIError):
    """The image corpus or a split could not be built."""


class ProtocolError(PLIError, RuntimeError):
    """A federation round was run with missing or inconsistent inputs."""


class RecoveryError(PLIError, ValueError):
    """Last-layer input recovery is impossible for the given gradients."""
