"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Input or parameter shapes do not line up."""


class NumericError(ArithmeticError):
    """Activations or losses became non-finite."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class ConsistencyError(ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class TransportError(ConnectionError):
    """The oracle could not be reached or returned garbage."""


class ServiceError(RuntimeError):
    """The oracle service failed to start."""
