"""Exception types shared across the package."""


class OcnetError(Exception):
    """Base class for all errors raised by ocnet."""


class DimensionError(OcnetError, ValueError):
    """Tensor extents are incompatible for the requested operation."""


class ContractError(OcnetError, ValueError):
    """A precondition on arguments was violated."""


class NumericError(OcnetError, ArithmeticError):
    """NaN or other non-finite values where finite values are required."""


class DataError(OcnetError, ValueError):
    """Dataset contents or labels are invalid."""
