"""Exception types shared across the package.

The CLI maps these onto exit codes: input/config problems exit with 2,
numeric/model problems exit with 3.
"""


class FDCamError(Exception):
    """Base class for all errors raised by fdcam."""


class InputError(FDCamError, ValueError):
    """Bad caller input: wrong shapes, out-of-range indices or parameters."""


class ConfigError(FDCamError, ValueError):
    """Invalid configuration, e.g. an unknown target layer."""


class NumericError(FDCamError, ArithmeticError):
    """Non-finite values appeared during a computation."""
