"""Exception types raised across the package."""


class StgcnError(Exception):
    """Base class for package errors."""


class ConfigurationError(StgcnError, ValueError):
    """Invalid configuration value, or statistics that cannot be computed."""


class FormatError(StgcnError, ValueError):
    """Malformed input file or record."""


class TruncationError(FormatError):
    """Binary payload shorter than its header announces."""


class DimensionError(StgcnError, ValueError):
    """Array shapes that do not line up."""


class InputError(StgcnError, ValueError):
    """Invalid argument value (empty inputs, out-of-range labels)."""
