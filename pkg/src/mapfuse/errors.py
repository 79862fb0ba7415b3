class MapFuseError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MapFuseError, ValueError):
    """Shapes or extents do not line up."""


class ContractError(MapFuseError, ValueError):
    """A documented precondition was violated."""


class FormatError(MapFuseError):
    """A serialized file is malformed or incompatible."""


class NumericError(MapFuseError, ArithmeticError):
    """A computation produced non-finite values."""
