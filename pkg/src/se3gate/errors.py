"""Exception types raised across the package."""


class Se3GateError(Exception):
    """Base class for all package errors."""


class NearPiRotation(Se3GateError, ValueError):
    """Rotation too close to pi for a finite Rodrigues vector."""


class NonFinite(Se3GateError, FloatingPointError):
    """A state or rollout left the finite range."""


class OffPlane(Se3GateError, ValueError):
    """A point expected on the gate plane is not on it."""


class DimensionMismatch(Se3GateError, ValueError):
    pass


class SchemaVersionMismatch(Se3GateError, ValueError):
    pass


class ShapeMismatch(Se3GateError, ValueError):
    pass


class EmptyDataset(Se3GateError, ValueError):
    pass


class ConfigError(Se3GateError, ValueError):
    """Base for configuration problems; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ConfigIo(ConfigError):
    """The configuration document could not be read."""


class UnknownKey(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass


class MissingArtifact(Se3GateError, FileNotFoundError):
    pass
