"""Exception types shared across the keymotion package."""


class ValidationError(ValueError):
    """A configuration or input value violates a documented invariant."""


class CalibrationError(RuntimeError):
    """A calibration capture or table failed validation."""


class ProtocolError(RuntimeError):
    """A bus frame or message could not be produced as requested."""


class EnumerationError(RuntimeError):
    """Bus enumeration found an inconsistent topology (e.g. duplicate address)."""


class RoutingError(KeyError):
    """A key event could not be mapped to a MIDI channel/note."""


class ConfigError(RuntimeError):
    """A board or host rejected a command because of its current configuration."""
