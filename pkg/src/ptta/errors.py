"""Exception hierarchy; classes map to CLI exit codes."""


class PttaError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 5


class ConfigError(PttaError):
    """Bad configuration: unknown keys, invalid values, missing files named in config."""

    exit_code = 2


class DataError(PttaError):
    """Data I/O failure: missing, truncated, or corrupt dataset/checkpoint files."""

    exit_code = 3


class NumericError(PttaError):
    """Numeric failure: non-finite values, degenerate geometry, domain violations."""

    exit_code = 4


class InternalError(PttaError):
    """Broken internal invariant; indicates a bug, not a user error."""

    exit_code = 5
