"""Exceptions shared across modules."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateFeatureError(ValueError):
    """A feature map has (numerically) zero variance, or a guarded
    denominator/radicand fell below the 1e-30 floor."""


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot_index} is "
            f"{pivot_value:.3e} (<= 1e-12)"
        )
