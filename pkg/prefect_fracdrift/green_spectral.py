"""
Green operators of the killed drift-diffusion, the H operator with its recursion
identity, the principal eigenpair by inverse power iteration, and amplitude sweeps.

Sign conventions: `L = Δ^(α/2) + A b·∇` and `M = -L = K + S - A·B`, where K is the
assembled fractional Laplacian matrix, B the unit-amplitude drift matrix and S
the Péclet stabilization, zero at moderate amplitudes.
Green operators invert M: `G̃_D f = M⁻¹ f`, `G_D f = K⁻¹ f`.
"""

import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse
from prefect.logging import get_logger
from scipy.sparse.linalg import expm_multiply

from prefect_fracdrift.drift_fields import (
    DriftOperator,
    Stencil,
    VectorField,
    assemble_drift,
    check_peclet,
    peclet_stabilization,
)
from prefect_fracdrift.exceptions import (
    ConvergenceError,
    DomainError,
    GridTooCoarseError,
)
from prefect_fracdrift.fractional_core import (
    DiffusionOperator,
    StableParams,
    assemble_fraclap,
)
from prefect_fracdrift.geometry import Domain, Grid, build_grid
from prefect_fracdrift.utilities import write_csv

logger = get_logger("prefect_fracdrift.green_spectral")

SWEEP_HEADER = ("A", "lambda", "iters", "residual", "seconds")


@dataclass(frozen=True, eq=False)
class CombinedOperator:
    """
    The killed generator L = Δ^(α/2) + A b·∇ on one grid.

    Past the grid Péclet threshold the drift is paired with the symmetric
    stabilization S of `peclet_stabilization`, so M = K + S - A·B stays a
    nonsingular M-matrix at every amplitude. The dense LU factorization of M is
    computed on first use and cached.

    Attributes:
        diffusion: The fractional Laplacian.
        drift: The drift operator, or None for the pure diffusion.
    """

    diffusion: DiffusionOperator
    drift: Optional[DriftOperator] = field(default=None)

    def __post_init__(self):
        if self.drift is not None and not self.diffusion.grid.same_lattice(
            self.drift.grid
        ):
            raise DomainError("Diffusion and drift were assembled on different grids.")

    @property
    def grid(self) -> Grid:
        """The shared grid."""
        return self.diffusion.grid

    @property
    def amplitude(self) -> float:
        """The drift amplitude A, 0 without drift."""
        return 0.0 if self.drift is None else self.drift.amplitude

    @cached_property
    def stabilization(self) -> scipy.sparse.csr_matrix:
        """The symmetric Péclet stabilization S(|A|), zero below the threshold."""
        return peclet_stabilization(self.diffusion.matrix, self.drift)

    @cached_property
    def perturbation(self) -> scipy.sparse.csr_matrix:
        """P = A·B - S, so that M = K - P."""
        if self.drift is None or self.drift.is_zero:
            return self.stabilization
        return (self.drift.matrix - self.stabilization).tocsr()

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense M = K + S - A·B."""
        if self.drift is None or self.drift.is_zero:
            return self.diffusion.matrix
        return self.diffusion.matrix - self.perturbation.toarray()

    @cached_property
    def _factorization(self):
        """LU factors of M, computed once."""
        lu, piv = scipy.linalg.lu_factor(self.matrix, check_finite=False)
        if np.any(np.diag(lu) == 0.0):
            raise np.linalg.LinAlgError(
                f"Singular factorization of K + S - A*B at A={self.amplitude}."
            )
        return lu, piv

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Applies L, that is `-M f`."""
        return -(self.matrix @ f)

    def solve(self, f: np.ndarray) -> np.ndarray:
        """Solves M u = f."""
        return scipy.linalg.lu_solve(self._factorization, f, check_finite=False)

    def solve_transposed(self, f: np.ndarray) -> np.ndarray:
        """Solves Mᵀ u = f."""
        return scipy.linalg.lu_solve(
            self._factorization, f, trans=1, check_finite=False
        )

    def with_amplitude(self, amplitude: float) -> "CombinedOperator":
        """The same operator at another drift amplitude."""
        if self.drift is None:
            raise DomainError("Operator has no drift to rescale.")
        return CombinedOperator(self.diffusion, self.drift.with_amplitude(amplitude))


def combine(
    diffusion: DiffusionOperator, drift: Optional[DriftOperator] = None
) -> CombinedOperator:
    """Pairs a diffusion and an optional drift operator on the same grid."""
    return CombinedOperator(diffusion=diffusion, drift=drift)


@dataclass(frozen=True, eq=False)
class EigenPair:
    """
    Principal eigenpair of -L.

    Attributes:
        lam: The principal eigenvalue λ > 0.
        phi: Eigenfunction on the interior nodes, unit h^d-norm, nonnegative sum.
        residual: Relative residual ‖Mφ - λφ‖ / λ.
        iterations: Inverse iterations used.
        positive: Whether φ ≥ 0 at every interior node.
        amplitude: The drift amplitude the pair belongs to.
    """

    lam: float
    phi: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    positive: bool
    amplitude: float = 0.0


def green_apply(op: CombinedOperator, f: np.ndarray) -> np.ndarray:
    """
    Applies the Green operator G̃_D.

    Args:
        op: The combined operator.
        f: Interior field.

    Returns:
        u with -L u = f.

    Example:
        Discrete expected exit time of the pure diffusion.
        ```python
        import numpy as np
        from prefect_fracdrift.fractional_core import StableParams, assemble_fraclap
        from prefect_fracdrift.geometry import Domain, build_grid
        from prefect_fracdrift.green_spectral import combine, green_apply

        grid = build_grid(Domain.disk(1.0), h=0.1)
        op = combine(assemble_fraclap(grid, StableParams(alpha=1.5)))
        exit_time = green_apply(op, np.ones(grid.n_interior))
        ```
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (op.grid.n_interior,):
        raise DomainError(
            f"Field of shape {f.shape} does not match {op.grid.n_interior} nodes."
        )
    return op.solve(f)


def exit_time_profile(op: CombinedOperator) -> np.ndarray:
    """G̃_D 1, the discrete expected exit time from each interior node."""
    return green_apply(op, np.ones(op.grid.n_interior))


def principal_eigenpair(
    op: CombinedOperator,
    tol: float = 1e-9,
    max_iter: int = 500,
    start: Optional[np.ndarray] = None,
) -> EigenPair:
    """
    Principal eigenpair by inverse power iteration.

    Each step applies G̃_D to the current vector; the eigenvalue estimate is
    1/ρ with ρ = ⟨G̃_D v, v⟩ / ⟨v, v⟩. The iteration stops once the relative
    change of the estimate is below `tol` and the relative residual is below
    `10 * tol`.

    Args:
        op: The combined operator.
        tol: Eigenvalue tolerance.
        max_iter: Iteration cap.
        start: Start vector; defaults to the constant 1.

    Returns:
        The eigenpair, with φ normalized and sign-fixed.

    Raises:
        DomainError: If `tol` is not positive.
        ConvergenceError: If the stopping rule is not met within `max_iter`.
    """
    if not tol > 0:
        raise DomainError(f"Tolerance must be positive, got {tol}.")
    grid = op.grid
    v = np.ones(grid.n_interior) if start is None else np.array(start, dtype=float)
    v /= grid.norm(v)
    lam_prev = math.nan
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        w = op.solve(v)
        rho = float(np.dot(w, v) / np.dot(v, v))
        lam = 1.0 / rho
        v = w / grid.norm(w)
        residual = grid.norm(op.matrix @ v - lam * v) / abs(lam)
        if abs(lam - lam_prev) < tol * abs(lam) and residual < 10.0 * tol:
            break
        lam_prev = lam
    else:
        raise ConvergenceError(
            f"principal_eigenpair(A={op.amplitude})", max_iter, residual
        )
    if v.sum() < 0:
        v = -v
    logger.debug(
        "Eigenpair at A=%s: lambda=%.12g after %s iterations",
        op.amplitude,
        lam,
        iteration,
    )
    return EigenPair(
        lam=lam,
        phi=v,
        residual=residual,
        iterations=iteration,
        positive=bool(np.all(v >= 0.0)),
        amplitude=op.amplitude,
    )


def recursion_identity_residual(
    L0: DiffusionOperator,
    B: DriftOperator,
    vectors: int = 20,
    seed: int = 0,
) -> float:
    """
    Checks G_D = G̃_D(I - H) with H = P·G_D on random vectors.

    P = A·B - S is the perturbation of `CombinedOperator`; below the Péclet
    threshold S vanishes and H = A·B·G_D.

    Args:
        L0: The fractional Laplacian.
        B: The drift operator, amplitude included.
        vectors: Number of random test vectors.
        seed: Seed of the vector generator.

    Returns:
        max over the vectors of ‖G̃_D(v - Hv) - G_D v‖ / ‖G_D v‖, or 0 without
        drift.
    """
    if B.is_zero:
        return 0.0
    plain = combine(L0)
    drifted = combine(L0, B)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(vectors):
        v = rng.standard_normal(L0.size)
        gv = plain.solve(v)
        hv = drifted.perturbation @ gv
        lhs = drifted.solve(v - hv)
        worst = max(worst, float(np.linalg.norm(lhs - gv) / np.linalg.norm(gv)))
    return worst


def h_operator_norm(
    L0: DiffusionOperator, B: DriftOperator, iterations: int = 100, seed: int = 0
) -> float:
    """
    Power-iteration estimate of the spectral norm of H = P·G_D.

    Returns:
        The estimate of ‖H‖₂, 0 without drift.
    """
    if B.is_zero:
        return 0.0
    plain = combine(L0)
    matrix = combine(L0, B).perturbation
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(L0.size)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        hv = matrix @ plain.solve(v)
        # G_D is symmetric, so Hᵀ = G_D Pᵀ
        w = plain.solve(matrix.T @ hv)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        estimate = math.sqrt(norm)
        v = w / norm
    return estimate


def duality_check(L0: DiffusionOperator, B: DriftOperator) -> float:
    """
    ‖M(A)ᵀ - M(-A)‖_max, which vanishes exactly for skew B.

    Transposing the generator with amplitude A gives the generator with -A; the
    stabilization depends on |A| only and is symmetric, so it drops out.
    """
    forward = combine(L0, B).matrix
    backward = combine(L0, B.with_amplitude(-B.amplitude)).matrix
    return float(np.max(np.abs(forward.T - backward)))


class SweepRow(NamedTuple):
    """One amplitude of an eigenvalue sweep."""

    A: float
    lam: float
    iters: int
    residual: float
    seconds: float


@dataclass
class SweepResult:
    """
    Principal eigenvalues across drift amplitudes.

    Attributes:
        rows: One row per amplitude, sorted by A.
        pairs: The eigenpairs, in the same order.
    """

    rows: List[SweepRow]
    pairs: List[EigenPair] = field(default_factory=list, repr=False)

    @property
    def amplitudes(self) -> np.ndarray:
        """The A column."""
        return np.array([row.A for row in self.rows])

    @property
    def eigenvalues(self) -> np.ndarray:
        """The λ column."""
        return np.array([row.lam for row in self.rows])

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Writes the rows with header `A,lambda,iters,residual,seconds`."""
        return write_csv(path, SWEEP_HEADER, self.rows)


def eigen_sweep(
    L0: DiffusionOperator,
    b: VectorField,
    A_list: Sequence[float],
    tol: float = 1e-9,
    max_iter: int = 500,
    stencil: Union[Stencil, str] = Stencil.AUTO,
) -> SweepResult:
    """
    Principal eigenpairs for each amplitude, warm-started from the previous φ.

    Args:
        L0: The fractional Laplacian.
        b: The drift field.
        A_list: Non-empty ascending amplitudes.
        tol: Eigenvalue tolerance.
        max_iter: Iteration cap per amplitude.
        stencil: Drift stencil, see `assemble_drift`.

    Returns:
        The sweep.

    Raises:
        DomainError: If `A_list` is empty or not ascending.
        ConvergenceError: Propagated from `principal_eigenpair`.
    """
    amplitudes = [float(a) for a in A_list]
    if not amplitudes:
        raise DomainError("A_list must not be empty.")
    if any(b2 < a for a, b2 in zip(amplitudes, amplitudes[1:])):
        raise DomainError(f"A_list must be ascending, got {amplitudes}.")
    unit = assemble_drift(L0.grid, b, 1.0, stencil=stencil)
    rows, pairs = [], []
    start = None
    for A in amplitudes:
        started = time.perf_counter()
        if A != 0 and unit.stencil is Stencil.LATTICE:
            check_peclet(L0.grid, b, A, L0.params)
        op = combine(L0, unit.with_amplitude(A))
        pair = principal_eigenpair(op, tol=tol, max_iter=max_iter, start=start)
        start = pair.phi
        rows.append(
            SweepRow(
                A=A,
                lam=pair.lam,
                iters=pair.iterations,
                residual=pair.residual,
                seconds=time.perf_counter() - started,
            )
        )
        pairs.append(pair)
    return SweepResult(rows=rows, pairs=pairs)


def write_eigenfunction(pair: EigenPair, grid: Grid, path: Union[str, Path]) -> Path:
    """Writes φ as CSV rows `x1,x2,phi`."""
    rows = (
        (float(x[0]), float(x[1]), float(value))
        for x, value in zip(grid.interior_points, pair.phi)
    )
    return write_csv(path, ("x1", "x2", "phi"), rows)


def decay_slope(
    values: np.ndarray,
    grid: Grid,
    lower: Optional[float] = None,
    upper: float = 0.2,
    min_nodes: int = 8,
) -> float:
    """
    Log-log regression slope of a positive interior field against δ_D.

    Args:
        values: Interior field.
        grid: The grid.
        lower: Smallest δ_D used; defaults to h, excluding the lattice boundary
            layer.
        upper: Regression nodes satisfy δ_D < upper.
        min_nodes: Fewest nodes the regression accepts.

    Returns:
        The fitted exponent.

    Raises:
        GridTooCoarseError: If fewer than `min_nodes` nodes qualify.
    """
    lower = grid.h if lower is None else lower
    values = np.asarray(values, dtype=float)
    band = (grid.delta >= lower) & (grid.delta < upper) & (values > 0)
    if band.sum() < min_nodes:
        raise GridTooCoarseError(
            f"Only {int(band.sum())} nodes with {lower} <= delta < {upper}; "
            f"need {min_nodes}."
        )
    slope, _ = np.polyfit(np.log(grid.delta[band]), np.log(values[band]), 1)
    return float(slope)


def boundary_decay_check(pair: EigenPair, grid: Grid, upper: float = 0.2) -> float:
    """
    Decay exponent of the eigenfunction at the boundary.

    Returns:
        The slope of log φ against log δ_D over nodes with h ≤ δ_D < `upper`;
        close to α/2.
    """
    return decay_slope(pair.phi, grid, upper=upper)


class GreenBand(NamedTuple):
    """Spread of the discrete Green function around its two-sided estimate."""

    min_ratio: float
    max_ratio: float
    band: float
    pairs: int


def green_comparability_band(
    L0: DiffusionOperator, samples: int = 400, columns: int = 20, seed: int = 0
) -> GreenBand:
    """
    Ratio of the discrete G_D(x, y) to its two-sided estimate.

    The estimate is r^(α-d)·min(1, (δ_x δ_y)^(α/2)/r^α) with r = |x - y|.

    Args:
        L0: The fractional Laplacian.
        samples: Number of random pairs.
        columns: Number of Green function columns solved for.
        seed: Seed of the pair sampler.

    Returns:
        The ratio band; nodes with δ_D < h/2 are excluded.
    """
    grid = L0.grid
    p = L0.params
    eligible = np.flatnonzero(grid.delta >= 0.5 * grid.h)
    rng = np.random.default_rng(seed)
    cols = rng.choice(eligible, size=min(columns, len(eligible)), replace=False)
    rhs = np.zeros((L0.size, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0 / grid.weight
    green = combine(L0).solve(rhs)

    which = rng.integers(0, len(cols), size=samples)
    rows = rng.choice(eligible, size=samples)
    keep = rows != cols[which]
    which, rows = which[keep], rows[keep]
    x = grid.interior_points[rows]
    y = grid.interior_points[cols[which]]
    r = np.hypot(*(x - y).T)
    boundary = (grid.delta[rows] * grid.delta[cols[which]]) ** (p.alpha / 2.0)
    estimate = r ** (p.alpha - p.d) * np.minimum(1.0, boundary / r**p.alpha)
    ratio = green[rows, which] / estimate
    return GreenBand(
        min_ratio=float(ratio.min()),
        max_ratio=float(ratio.max()),
        band=float(ratio.max() / ratio.min()),
        pairs=int(len(ratio)),
    )


def grid_survival(
    op: CombinedOperator, t_max: float, num: int = 51
) -> Sequence[np.ndarray]:
    """
    Survival curve of the killed process started uniformly on the interior nodes.

    Args:
        op: The combined operator.
        t_max: Final time.
        num: Number of equally spaced times, 0 included.

    Returns:
        `(times, survival)` with survival(t) the node average of e^(tL)1.
    """
    times = np.linspace(0.0, t_max, num)
    ones = np.ones(op.grid.n_interior)
    values = expm_multiply(
        -op.matrix, ones, start=0.0, stop=t_max, num=num, endpoint=True
    )
    return times, values.mean(axis=1)


class ConvergenceStudy(NamedTuple):
    """Pure-diffusion eigenvalues across grid spacings."""

    hs: List[float]
    eigenvalues: List[float]
    increments: List[float]
    ratios: List[float]


def grid_convergence_study(
    domain: Domain, p: StableParams, hs: Sequence[float], tol: float = 1e-10
) -> ConvergenceStudy:
    """
    λ₀ on a sequence of grids, with successive increments and their ratios.

    Args:
        domain: The domain.
        p: Stable parameters.
        hs: Grid spacings, coarse to fine.
        tol: Eigenvalue tolerance.

    Returns:
        The study; `ratios[k] = increments[k] / increments[k + 1]`.
    """
    eigenvalues = []
    for h in hs:
        op = combine(assemble_fraclap(build_grid(domain, h), p))
        eigenvalues.append(principal_eigenpair(op, tol=tol).lam)
        logger.info("Grid h=%s: lambda_0=%.10g", h, eigenvalues[-1])
    increments = list(np.diff(eigenvalues))
    ratios = [
        a / b if b != 0 else math.inf for a, b in zip(increments, increments[1:])
    ]
    return ConvergenceStudy(
        hs=list(hs),
        eigenvalues=eigenvalues,
        increments=[float(x) for x in increments],
        ratios=[float(x) for x in ratios],
    )
