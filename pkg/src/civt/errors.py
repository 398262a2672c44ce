"""Exception types shared across the package.

Everything raised deliberately by this package derives from CivtError so
callers (and the CLI) can catch one base class and report a clean error
line instead of a traceback.
"""


class CivtError(Exception):
    """Base class for all errors raised on purpose by this package."""


class ShapeError(CivtError):
    """An operand has the wrong shape, rank, or an incompatible extent."""


class ConfigError(CivtError):
    """A config value, model spec, or CLI argument violates a constraint."""


class DataFormatError(CivtError):
    """A binary file (dataset or checkpoint) is malformed or truncated."""


class NumericsError(CivtError):
    """A numeric invariant was violated (non-finite values, bad loss)."""
