"""Exception types shared across the package.

The CLI maps these onto exit codes: config/validation problems exit 1,
malformed or unreadable files exit 2, numeric divergence exits 3.
"""


class OsvitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OsvitError):
    """Invalid configuration, arguments, or precondition violation."""


class ShapeError(ConfigError):
    """Tensor or volume dimensions incompatible with an operation."""


class FormatError(OsvitError):
    """Malformed file content (bad magic, truncated data, bad CSV row)."""


class DivergenceError(OsvitError):
    """NaN/Inf encountered in a numeric computation that must stay finite."""
