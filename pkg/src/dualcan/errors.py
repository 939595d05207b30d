"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument value or combination of values is invalid."""


class ShapeError(ParameterError):
    """An array argument has the wrong dimensionality or width."""


class StateError(RuntimeError):
    """The operation is not valid for the current state of its inputs."""


class NumericError(ArithmeticError):
    """A non-finite value was produced where finite math is required."""

    def __init__(self, message: str, model=None):
        super().__init__(message)
        self.model = model


class FormatError(Exception):
    """A serialized file is malformed; ``byte_offset`` points at the bad region."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class VersionError(Exception):
    """A serialized file carries an unsupported format version."""


class ConfigError(Exception):
    """A run configuration file is missing, incomplete, or unparsable."""
