from . import _version
from .config import RunConfig
from .fractional_core import StableParams, assemble_fraclap
from .drift_fields import assemble_drift
from .geometry import Domain, build_grid
from .green_spectral import combine, eigen_sweep, principal_eigenpair
from .flows import (
    checks_flow,
    first_integrals_flow,
    kernel_series_flow,
    mc_flow,
    sweep_flow,
)

__all__ = [
    "Domain",
    "RunConfig",
    "StableParams",
    "assemble_drift",
    "assemble_fraclap",
    "build_grid",
    "checks_flow",
    "combine",
    "eigen_sweep",
    "first_integrals_flow",
    "kernel_series_flow",
    "mc_flow",
    "principal_eigenpair",
    "sweep_flow",
]

__version__ = _version.__version__
