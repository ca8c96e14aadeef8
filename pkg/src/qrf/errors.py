"""Exception taxonomy shared across the toolkit.

The CLI maps these onto distinct exit codes (see qrf.cli), so library code
should raise the most specific class that applies rather than bare
ValueError/IOError.
"""


class QrfError(Exception):
    """Base class for all toolkit errors."""


class InputError(QrfError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class ConfigError(QrfError, ValueError):
    """A run configuration file or flag set is malformed or inconsistent."""


class StoreError(QrfError, IOError):
    """A binary container on disk is missing, truncated, or corrupt."""


class NumericalError(QrfError, RuntimeError):
    """An optimization or numerical routine produced a non-finite result."""
