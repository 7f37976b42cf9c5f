"""Exception types shared across the package."""


class CabinError(Exception):
    """Base class for all cabinfusion errors."""


class ParseError(CabinError):
    """Input bytes/text could not be parsed at all (malformed JSON, bad CSV field)."""


class SchemaError(CabinError):
    """Parsed input does not match the expected schema (missing key, wrong variant)."""


class ValidationError(CabinError):
    """A value violates a domain invariant (range, closed set, cross-field rule)."""


class CalibrationError(CabinError):
    """Not enough usable records to fit a clock model."""


class ReplayError(CabinError):
    """An offline log could not be read; message names the file."""


class IoError(CabinError):
    """A persistence sink failed; carries the rows written so far."""

    def __init__(self, message: str, rows_written: int = 0):
        super().__init__(message)
        self.rows_written = rows_written


class StateError(CabinError):
    """Operation not valid in the current session lifecycle state."""


class NotFoundError(CabinError):
    """Referenced session does not exist."""


class ConfigError(CabinError):
    """Collector configuration is unusable."""


class TransportError(CabinError):
    """A transport endpoint could not be reached or used."""
