"""Exception hierarchy shared by every laneseg module."""


class LanesegError(Exception):
    """Base class for all errors raised by laneseg."""


class DimensionError(LanesegError, ValueError):
    """A tensor or image has the wrong shape along a named axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class NumericError(LanesegError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class ConfigError(LanesegError, ValueError):
    """Invalid configuration value or configuration file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(LanesegError, ValueError):
    """Input data (images, labels, manifests) is malformed."""


class InputError(LanesegError, ValueError):
    """An operation received an empty or otherwise unusable input collection."""


class StateError(LanesegError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class TrainingError(NumericError):
    """Training diverged. ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(LanesegError, ValueError):
    """Base class for LSEG checkpoint parse failures."""


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ProtocolError(LanesegError):
    """Malformed wire traffic. ``code`` is the ERROR code sent to the peer."""

    def __init__(self, message: str, code: int = 0):
        super().__init__(message)
        self.code = code


class RemoteError(LanesegError):
    """The peer answered with an ERROR message."""

    def __init__(self, code: int, reason: str):
        super().__init__(f"server error {code}: {reason}")
        self.code = code
        self.reason = reason
