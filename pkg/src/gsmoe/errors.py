"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates an operation's preconditions."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ContainerError(IOError):
    """Base class for GSMK container load failures."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass
