"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError -> 3,
CapabilityError -> 4.
"""


class TempBidError(Exception):
    pass


class ConfigError(TempBidError, ValueError):
    """Bad configuration value; `key_path` names the offending key."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        self.detail = message
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class DataError(TempBidError, ValueError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class IntegrityError(DataError):
    pass


class CapabilityError(TempBidError):
    """Requested probe or mode needs a feature the model does not have."""


class ShapeError(TempBidError, ValueError):
    pass


class GraphStateError(TempBidError, RuntimeError):
    """backward() called without a recorded forward pass."""


class EpisodeStateError(TempBidError, RuntimeError):
    pass


class SizeError(TempBidError, ValueError):
    """Instance too large for exhaustive enumeration."""


class ContractError(TempBidError, ValueError):
    pass


class CompatibilityError(TempBidError, ValueError):
    """Checkpoint does not match the configured network shapes."""
