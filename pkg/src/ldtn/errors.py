"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor legs or physical dimensions do not line up."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class DegenerateEigenvectorError(NumericError):
    """Left and right eigenvectors have (numerically) vanishing overlap."""


class ModelViolationError(NumericError):
    """A result contradicts a structural property of the model,
    e.g. a complex dominant eigenvalue of a CP map."""
