"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes incompatible with the declared model or dataset."""


class NumericError(ValueError):
    """Non-finite values showed up where finite arithmetic is required."""


class ParseError(ValueError):
    """Malformed input file (IDX, CSV, or a record payload)."""


class ConfigError(ValueError):
    """Invalid or internally inconsistent configuration."""


class ProtocolError(RuntimeError):
    """A client/server exchange violated the messenger protocol."""


class ContractViolation(RuntimeError):
    """An operation was invoked outside its documented contract."""
