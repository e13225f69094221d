"""Exception types shared across the package.

The CLI maps these onto exit codes: validation-type errors exit 1, numeric
failures exit 2.
"""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent; message names the offending axes."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class ParseError(ValueError):
    """Malformed input file; message carries the line number."""


class NumericError(RuntimeError):
    """Non-finite value produced where a finite one is required."""
