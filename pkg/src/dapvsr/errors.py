"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions inconsistent with an operation's contract."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class StateError(RuntimeError):
    """Operation invoked outside its valid lifecycle (e.g. backward without forward)."""


class WeightsFormatError(ValueError):
    """Malformed or truncated weights/tensor container."""
