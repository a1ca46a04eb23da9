"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, anything else -> 3.
"""


class DimensionError(ValueError):
    """Array shapes do not compose for the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration, bad usage, or a missing stage artifact."""


class DataError(ValueError):
    """Malformed dataset file or out-of-range labels."""


class CorruptModelError(DataError):
    """A model/checkpoint container fails its format invariants."""


class StaleStateError(RuntimeError):
    """A cached object predates the current network parameters."""
