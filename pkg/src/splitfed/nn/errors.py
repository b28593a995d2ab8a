class ShapeError(ValueError):
    """Incompatible tensor or layer shapes."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class TapeMismatchError(ValueError):
    """A tape was replayed against a model it was not recorded on."""
