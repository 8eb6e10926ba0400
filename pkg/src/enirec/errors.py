"""Exception hierarchy shared by every stage of the pipeline."""


class EnirecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnirecError, ValueError):
    pass


class FormatError(EnirecError, ValueError):
    """Input log is malformed beyond the tolerated fraction."""


class PreconditionError(EnirecError, ValueError):
    pass


class EmptyDatasetError(EnirecError):
    pass


class CatalogError(EnirecError, KeyError):
    """An item index falls outside the catalog."""

    def __str__(self):
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class ShapeError(EnirecError, ValueError):
    pass


class NumericError(EnirecError, ArithmeticError):
    """NaN or Inf showed up where finite numbers are required."""
