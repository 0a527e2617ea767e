"""Exceptions raised by the fractional drift lab."""

from typing import Optional


class FracDriftError(Exception):
    """Base class for every error raised by `prefect_fracdrift`."""


class GridTooCoarseError(FracDriftError, ValueError):
    """Raised when a grid has no interior node."""


class DomainError(FracDriftError, ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class ConfigError(FracDriftError, ValueError):
    """Raised when a run configuration cannot be parsed or validated."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NonSkewDriftError(FracDriftError, ValueError):
    """Raised when a drift matrix is not skew, i.e. the field is compressible."""

    def __init__(self, defect: float):
        self.defect = defect
        super().__init__(
            f"Drift matrix is not skew (max |B + B^T| = {defect:.3e}); "
            "the field is not discretely divergence-free."
        )


class ConvergenceError(FracDriftError, RuntimeError):
    """Raised when the inverse power iteration does not converge."""

    def __init__(self, stage: str, iterations: int, residual: float):
        self.stage = stage
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"{stage} did not converge after {iterations} iterations "
            f"(last residual {residual:.3e})"
        )


class QuadratureError(FracDriftError, RuntimeError):
    """Raised when successive quadrature refinements disagree."""

    def __init__(self, coarse: float, fine: float, tolerance: float):
        self.coarse = coarse
        self.fine = fine
        self.tolerance = tolerance
        super().__init__(
            f"Quadrature refinements differ by more than {tolerance:.0%}: "
            f"coarse={coarse:.17g}, fine={fine:.17g}"
        )


class FlowExitError(FracDriftError, RuntimeError):
    """Raised when a trajectory leaves the bounding box."""

    def __init__(self, exit_time: float, point: Optional[tuple] = None):
        self.exit_time = exit_time
        self.point = point
        super().__init__(f"Trajectory left the bounding box at t={exit_time:.6g}")


class EstimatorError(FracDriftError, RuntimeError):
    """Raised when the survival estimator has no data in its fit window."""
