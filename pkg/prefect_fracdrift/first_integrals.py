"""
Discrete first integrals of the drift and the constrained minimum of the
Dirichlet form over them, with flow integration and the invariance checks that
tie the discrete kernel back to trajectories.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from prefect.logging import get_logger
from scipy.interpolate import RegularGridInterpolator

from prefect_fracdrift.drift_fields import (
    DriftOperator,
    Stencil,
    VectorField,
    skewness_defect,
)
from prefect_fracdrift.exceptions import DomainError, FlowExitError, NonSkewDriftError
from prefect_fracdrift.fractional_core import DiffusionOperator, dirichlet_form
from prefect_fracdrift.geometry import Grid
from prefect_fracdrift.green_spectral import EigenPair, SweepResult
from prefect_fracdrift.utilities import write_csv

logger = get_logger("prefect_fracdrift.first_integrals")

#: Relative size of B + Bᵀ above which a drift matrix counts as compressible.
SKEW_TOLERANCE = 1e-10
MAX_FLOW_STEPS = 10_000_000


@dataclass(frozen=True, eq=False)
class FirstIntegralSpace:
    """
    Kernel of the skew drift matrix, the discrete first integrals.

    Attributes:
        basis: Columns orthonormal in the h^d inner product, shape `(n, k)`.
        singular_values: Full singular spectrum of B, descending.
        threshold: Relative cut; σ ≤ threshold·σ_max counts as kernel.
        grid: The grid.
    """

    basis: np.ndarray = field(repr=False)
    singular_values: np.ndarray = field(repr=False)
    threshold: float
    grid: Grid = field(repr=False)

    @property
    def k(self) -> int:
        """Dimension of the space."""
        return self.basis.shape[1]

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """Coordinates of the orthogonal projection of `f` in the basis."""
        return self.grid.weight * (self.basis.T @ f)

    def project(self, f: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the space."""
        return self.basis @ self.coefficients(f)

    def singular_values_to_csv(self, path: Union[str, Path]) -> Path:
        """Writes the singular spectrum of B, one value per row under `sigma`."""
        return write_csv(path, ("sigma",), ((float(s),) for s in self.singular_values))

    def basis_to_csv(self, path: Union[str, Path]) -> Path:
        """Writes `x1,x2,q1..qk`, one row per interior node."""
        header = ("x1", "x2") + tuple(f"q{j + 1}" for j in range(self.k))
        rows = (
            (float(x[0]), float(x[1]), *map(float, q))
            for x, q in zip(self.grid.interior_points, self.basis)
        )
        return write_csv(path, header, rows)


class MinimizerResult(NamedTuple):
    """
    Minimum of the Dirichlet form over unit first integrals.

    `e_star` is +inf and `w_star` None when the space is trivial.
    """

    e_star: float
    w_star: Optional[np.ndarray]
    k: int


def _alternating_modes(B: DriftOperator) -> np.ndarray:
    """
    Unit sign-alternating vectors on the moving orbits of an orbit stencil.

    A skew cyclic difference annihilates (-1)^j on every orbit of even length,
    so these vectors lie in the kernel of B although the flow does not leave
    them invariant. Orbits on which the field vanishes are left alone.
    """
    grid = B.grid
    moving = np.asarray(abs(B.unit).sum(axis=1)).ravel() > 0
    modes = []
    for orbit in grid.lattice_orbits():
        if len(orbit) % 2 or not moving[orbit].any():
            continue
        mode = np.zeros(grid.n_interior)
        mode[orbit] = (-1.0) ** np.arange(len(orbit)) / math.sqrt(len(orbit))
        modes.append(mode)
    if not modes:
        return np.zeros((grid.n_interior, 0))
    return np.column_stack(modes)


def _without_alternating(kernel: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the part of `kernel` orthogonal to `modes`."""
    if not modes.shape[1]:
        return kernel
    residual = kernel - modes @ (modes.T @ kernel)
    u, s, _ = scipy.linalg.svd(residual, full_matrices=False)
    logger.debug("Dropped %s alternating orbit modes", modes.shape[1])
    return u[:, s > 0.5]


def first_integral_space(
    B: DriftOperator, svd_threshold: float = 1e-8
) -> FirstIntegralSpace:
    """
    Computes the discrete first integrals as the kernel of B.

    With the orbit stencil the kernel also holds one sign-alternating vector per
    moving orbit; those are removed, leaving the orbit-constant functions and
    the free values on orbits where the field vanishes.

    Args:
        B: Skew drift operator.
        svd_threshold: Relative singular value cut, in (0, 1).

    Returns:
        The first-integral space; every grid function when B vanishes.

    Raises:
        DomainError: If the threshold is outside (0, 1).
        NonSkewDriftError: If B is not skew.

    Example:
        Radial functions are first integrals of a rotation.
        ```python
        from prefect_fracdrift.drift_fields import assemble_drift, rotational_field
        from prefect_fracdrift.first_integrals import first_integral_space
        from prefect_fracdrift.geometry import Domain, build_grid

        grid = build_grid(Domain.disk(1.0), h=0.1)
        space = first_integral_space(assemble_drift(grid, rotational_field(), A=1.0))
        print(space.k)
        ```
    """
    if not 0.0 < svd_threshold < 1.0:
        raise DomainError(f"SVD threshold must lie in (0, 1), got {svd_threshold}.")
    grid = B.grid
    n = grid.n_interior
    if B.is_zero:
        return FirstIntegralSpace(
            basis=np.eye(n) / grid.h,
            singular_values=np.zeros(n),
            threshold=svd_threshold,
            grid=grid,
        )
    matrix = B.matrix.toarray()
    scale = float(np.max(np.abs(matrix)))
    defect = skewness_defect(matrix)
    if defect > SKEW_TOLERANCE * scale:
        raise NonSkewDriftError(defect)
    _, sigma, vh = scipy.linalg.svd(matrix)
    kernel = vh[sigma <= svd_threshold * sigma[0]].T
    if B.stencil is Stencil.ORBIT:
        kernel = _without_alternating(kernel, _alternating_modes(B))
    logger.debug("First integral space: k=%s of n=%s", kernel.shape[1], n)
    return FirstIntegralSpace(
        basis=kernel / grid.h,
        singular_values=sigma,
        threshold=svd_threshold,
        grid=grid,
    )


def _projected_form(op: DiffusionOperator, space: FirstIntegralSpace) -> np.ndarray:
    """The symmetrized Gram matrix Q^T K Q of the energy on the first integrals."""
    if not op.grid.same_lattice(space.grid):
        raise DomainError("Operator and first-integral space use different grids.")
    projected = op.grid.weight * (space.basis.T @ (op.matrix @ space.basis))
    return 0.5 * (projected + projected.T)


def min_rayleigh(op: DiffusionOperator, space: FirstIntegralSpace) -> MinimizerResult:
    """
    Minimizes E^α(w, w) over unit-norm w in the first-integral space.

    Args:
        op: The fractional Laplacian.
        space: First integrals on the same grid.

    Returns:
        The minimum and a minimizer with nonnegative sum; +inf for k = 0.
    """
    if space.k == 0:
        return MinimizerResult(e_star=math.inf, w_star=None, k=0)
    values, vectors = scipy.linalg.eigh(
        _projected_form(op, space), subset_by_index=[0, 0]
    )
    w = space.basis @ vectors[:, 0]
    if w.sum() < 0:
        w = -w
    return MinimizerResult(e_star=float(values[0]), w_star=w, k=space.k)


def projection_distance(f: np.ndarray, space: FirstIntegralSpace) -> float:
    """h^d-norm distance from `f` to the first-integral space."""
    return space.grid.norm(f - space.project(f))


def upper_bound_check(
    sweep: SweepResult, space: FirstIntegralSpace, op: DiffusionOperator
) -> float:
    """
    Largest violation of λ_A ≤ E^α(w, w) over unit first integrals and sweep rows.

    Returns:
        max_A λ_A - (e*(1 + 1e-6) + 1e-8); nonpositive when the bound holds.
    """
    e_star = min_rayleigh(op, space).e_star
    if math.isinf(e_star):
        return -math.inf
    return float(np.max(sweep.eigenvalues) - (e_star * (1.0 + 1e-6) + 1e-8))


def integrate_flow(
    b: VectorField,
    x0: Sequence[float],
    t: float,
    dt: float,
    box: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
) -> np.ndarray:
    """
    Integrates dX/dt = b(X) with the classical fourth-order Runge-Kutta scheme.

    Args:
        b: The field.
        x0: Start point(s), shape `(2,)` or `(m, 2)`.
        t: Final time; negative values run the flow backwards.
        dt: Largest step.
        box: Optional `(lower, upper)` corners the trajectory must stay in.

    Returns:
        X(t, x0), with the shape of `x0`.

    Raises:
        DomainError: If `dt <= 0` or more than 10⁷ steps are needed.
        FlowExitError: If a trajectory leaves `box`.
    """
    if not dt > 0:
        raise DomainError(f"Step must be positive, got dt={dt}.")
    steps = int(math.ceil(abs(t) / dt))
    if steps > MAX_FLOW_STEPS:
        raise DomainError(f"{steps} flow steps exceed the cap of {MAX_FLOW_STEPS}.")
    x = np.array(x0, dtype=float)
    if steps == 0:
        return x
    step = t / steps
    lower = upper = None
    if box is not None:
        lower, upper = np.asarray(box[0]), np.asarray(box[1])
    for k in range(steps):
        k1 = b(x)
        k2 = b(x + 0.5 * step * k1)
        k3 = b(x + 0.5 * step * k2)
        k4 = b(x + step * k3)
        x = x + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if lower is not None:
            outside = np.any((x < lower) | (x > upper), axis=-1)
            if np.any(outside):
                point = np.atleast_2d(x)[np.atleast_1d(outside)][0]
                raise FlowExitError((k + 1) * step, tuple(point))
    return x


def interpolate_field(grid: Grid, w: np.ndarray) -> RegularGridInterpolator:
    """Bilinear interpolant of an interior field, zero on exterior nodes and beyond."""
    return RegularGridInterpolator(
        grid.axes, grid.to_full(w), bounds_error=False, fill_value=0.0
    )


def invariance_check(
    w: np.ndarray,
    grid: Grid,
    b: VectorField,
    sample_count: int = 200,
    t: float = 0.5,
    dt: float = 1e-3,
    rho: float = 0.2,
    seed: int = 0,
) -> float:
    """
    Largest change of `w` along sampled trajectories of b.

    Args:
        w: Interior field.
        grid: The grid.
        b: The field.
        sample_count: Number of random start points with δ_D > `rho`.
        t: Flow time.
        dt: Flow step.
        rho: Distance to the boundary the start points keep.
        seed: Seed of the sampler.

    Returns:
        max |w(X(t, x)) - w(x)| with bilinear interpolation of w.
    """
    rng = np.random.default_rng(seed)
    lower, upper = np.asarray(grid.lower), np.asarray(grid.upper)
    starts = []
    while sum(len(s) for s in starts) < sample_count:
        candidates = rng.uniform(lower, upper, size=(4 * sample_count, 2))
        starts.append(candidates[grid.domain.signed_distance(candidates) > rho])
    x = np.concatenate(starts)[:sample_count]
    interpolant = interpolate_field(grid, w)
    moved = integrate_flow(b, x, t, dt)
    return float(np.max(np.abs(interpolant(moved) - interpolant(x))))


def truncate(w: np.ndarray, level: float) -> np.ndarray:
    """w_N = (w ∧ N) ∨ (-N)."""
    return np.clip(w, -level, level)


def truncation_closure(w: np.ndarray, level: float, space: FirstIntegralSpace) -> float:
    """
    Distance from the truncated function w_N to the first-integral space.

    Returns:
        ‖w_N - P w_N‖ in the h^d norm.
    """
    return projection_distance(truncate(w, level), space)


def elementary_identity_defect(
    u_x: np.ndarray, u_y: np.ndarray, v_x: np.ndarray, v_y: np.ndarray
) -> np.ndarray:
    """
    Defect of the pointwise identity behind the conditioning argument.

    For v > 0: [u(x) - u(y)]² + u(x)²(v(y) - v(x))/v(x) + u(y)²(v(x) - v(y))/v(y)
    equals v(x)v(y)[u(x)/v(x) - u(y)/v(y)]².

    Returns:
        Left side minus right side, elementwise.
    """
    lhs = (u_x - u_y) ** 2 + u_x**2 * (v_y - v_x) / v_x + u_y**2 * (v_x - v_y) / v_y
    rhs = v_x * v_y * (u_x / v_x - u_y / v_y) ** 2
    return lhs - rhs


class ConditioningCheck(NamedTuple):
    """Both sides of the conditioned eigenvalue identity."""

    lhs: float
    rhs: float
    identity_defect: float


def conditioning_identity_check(
    w: np.ndarray,
    pair: EigenPair,
    op: DiffusionOperator,
    eps: float,
    samples: int = 1000,
    seed: int = 0,
) -> ConditioningCheck:
    """
    Tests λ Σ φ w²/(φ+ε) h^d against the jump double sum of (w²/(φ+ε), φ).

    Args:
        w: A bounded first integral.
        pair: Converged eigenpair.
        op: The fractional Laplacian.
        eps: Regularization ε > 0.
        samples: Random pairs for the pointwise identity.
        seed: Seed of the pointwise sampler.

    Returns:
        `lhs`, `rhs` and the largest pointwise identity defect.

    Raises:
        DomainError: If `eps <= 0`.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}.")
    phi = pair.phi
    psi = w**2 / (phi + eps)
    h2 = op.grid.weight
    lhs = pair.lam * h2 * float(np.sum(phi * psi))

    weights = -op.matrix.copy()
    np.fill_diagonal(weights, 0.0)
    jumps = 0.5 * np.sum(
        weights * (psi[:, None] - psi[None, :]) * (phi[:, None] - phi[None, :])
    )
    rhs = h2 * float(jumps + np.sum(psi * phi * op.killing))

    rng = np.random.default_rng(seed)
    i, j = rng.integers(0, len(w), size=(2, samples))
    defect = elementary_identity_defect(w[i], w[j], phi[i] + eps, phi[j] + eps)
    return ConditioningCheck(
        lhs=lhs, rhs=rhs, identity_defect=float(np.max(np.abs(defect)))
    )


class ConditionedBound(NamedTuple):
    """E(w_N, w_N) against λ Σ w_N² φ/(φ+ε) h^d."""

    energy: float
    bound: float
    holds: bool


def conditioned_bound_check(
    w: np.ndarray, pair: EigenPair, op: DiffusionOperator, level: float, eps: float
) -> ConditionedBound:
    """
    Checks E^α(w_N, w_N) ≥ λ Σ w_N² φ/(φ+ε) h^d for a truncated first integral.

    Raises:
        DomainError: If `eps <= 0`.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}.")
    w_n = truncate(w, level)
    energy = dirichlet_form(w_n, w_n, op)
    bound = pair.lam * op.grid.weight * float(
        np.sum(w_n**2 * pair.phi / (pair.phi + eps))
    )
    return ConditionedBound(
        energy=energy, bound=bound, holds=bool(energy >= bound * (1.0 - 1e-10))
    )
