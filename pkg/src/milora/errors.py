"""Exception hierarchy shared across the package."""


class MiloraError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MiloraError, ValueError):
    """Invalid configuration; the message lists the failing fields."""


class DimensionError(MiloraError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(MiloraError, FloatingPointError):
    """An operation produced NaN or Inf."""


class GradCheckError(MiloraError):
    """The finite-difference oracle could not evaluate the objective."""


class TrainingError(MiloraError):
    """Training aborted, e.g. on a non-finite loss."""


class FormatError(MiloraError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class InvalidDimsError(FormatError):
    pass
