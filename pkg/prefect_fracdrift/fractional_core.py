"""
The isotropic α-stable jump kernel, the discrete fractional Laplacian with the
Dirichlet exterior condition, its Dirichlet form, and the free-space heat kernel.

The operator is nonlocal, so the discrete matrix couples every pair of interior
nodes and is stored dense.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import scipy.io
import scipy.sparse
from prefect.logging import get_logger
from scipy import integrate, special

from prefect_fracdrift.exceptions import DomainError
from prefect_fracdrift.geometry import Domain, Grid, build_grid

logger = get_logger("prefect_fracdrift.fractional_core")

#: Gauss-Legendre nodes per panel for the radial Fourier inversion.
KERNEL_PANEL_NODES = 64
#: Uniform panels on [0, 50 t^(-1/α)]; the first is further split geometrically.
KERNEL_PANELS = 64
KERNEL_CUTOFF = 50.0
#: Half-width, in cells, of the lattice on which the far-field moment is matched.
MOMENT_CELLS = 200
#: Smallest link fraction θ the boundary flux accepts.
BOUNDARY_FRACTION_FLOOR = 0.05


def stable_constant(alpha: float, d: int = 2) -> float:
    """
    Normalization A_{d,α} of the Lévy density.

    With this constant, ∫(1 - cos ξ·y) ν(y) dy = |ξ|^α.

    Args:
        alpha: Stability index.
        d: Dimension.

    Returns:
        α 2^(α-1) Γ((d+α)/2) / (π^(d/2) Γ(1-α/2)).
    """
    return (
        alpha
        * 2.0 ** (alpha - 1.0)
        * special.gamma((d + alpha) / 2.0)
        / (math.pi ** (d / 2.0) * special.gamma(1.0 - alpha / 2.0))
    )


@dataclass(frozen=True)
class StableParams:
    """
    Parameters of the isotropic α-stable jump kernel in the plane.

    Attributes:
        alpha: Stability index, in the open interval (1, 2).
        d: Dimension, fixed to 2.
    """

    alpha: float
    d: int = 2

    def __post_init__(self):
        """Only 1 < α < 2 in the plane is supported."""
        if not 1.0 < self.alpha < 2.0:
            raise DomainError(f"alpha must lie in (1, 2), got {self.alpha}.")
        if self.d != 2:
            raise DomainError("Only the planar case d = 2 is supported.")

    @property
    def A(self) -> float:
        """The normalization constant A_{d,α}."""
        return stable_constant(self.alpha, self.d)


def levy_density(y: np.ndarray, p: StableParams) -> np.ndarray:
    """
    Lévy density ν(y) = A_{d,α} |y|^(-d-α).

    Args:
        y: Jump vector(s), shape `(..., 2)`.
        p: Stable parameters.

    Returns:
        Density values, shape `y.shape[:-1]`.

    Raises:
        DomainError: If any jump vector is zero.
    """
    y = np.asarray(y, dtype=float)
    r = np.hypot(y[..., 0], y[..., 1])
    if np.any(r == 0.0):
        raise DomainError("The Lévy density is singular at y = 0.")
    return p.A * r ** (-p.d - p.alpha)


def symbol_by_quadrature(xi: np.ndarray, p: StableParams) -> float:
    """
    Evaluates ∫(1 - cos ξ·y) ν(y) dy by radial quadrature.

    In polar coordinates the angular integral is 2π(1 - J0(|ξ|ρ)), leaving a
    one-dimensional integral that is split at ρ = 1/|ξ| for the two regimes of
    the integrand.

    Args:
        xi: Frequency vector.
        p: Stable parameters.

    Returns:
        The symbol, which equals |ξ|^α.
    """
    k = float(np.hypot(*np.asarray(xi, dtype=float)))
    if k == 0.0:
        return 0.0

    def integrand(rho):
        return (1.0 - special.j0(k * rho)) * rho ** (-1.0 - p.alpha)

    near, _ = integrate.quad(integrand, 0.0, 1.0 / k, limit=200)
    far, _ = integrate.quad(integrand, 1.0 / k, np.inf, limit=400)
    return 2.0 * math.pi * p.A * (near + far)


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    return np.polynomial.legendre.leggauss(n)


def _integrate_cos_power(
    lo: np.ndarray, hi: np.ndarray, power: float, nodes: int = 64
) -> np.ndarray:
    """∫_lo^hi cos(φ)^power dφ, vectorized over the bounds."""
    x, w = _gauss_legendre(nodes)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    phi = mid[..., None] + half[..., None] * x
    return half * np.sum(w * np.cos(phi) ** power, axis=-1)


def _square_moment(alpha: float) -> float:
    """∫|u|^(-α) du over |u|∞ ≤ 1; over |u|∞ ≤ a it scales by a^(2-α)."""
    angular = _integrate_cos_power(
        np.array(0.0), np.array(math.pi / 4.0), alpha - 2.0
    )
    return 8.0 * float(angular) / (2.0 - alpha)


@lru_cache(maxsize=None)
def far_moment_defect(alpha: float, cells: int = MOMENT_CELLS) -> float:
    """
    Second moment of ν that the midpoint far-field weights miss, in cell units.

    The exact ∫|u|^(-α) du over the cells with 2 ≤ |j|∞ ≤ `cells` minus the
    midpoint sum Σ|j|^(-α) over the same cells. The integrand is convex, so the
    defect is positive; cells beyond `cells` contribute O(cells^(-α)).

    Args:
        alpha: Stability index.
        cells: Half-width of the summed lattice.

    Returns:
        The defect, independent of h.
    """
    exact = _square_moment(alpha) * (
        (cells + 0.5) ** (2.0 - alpha) - 1.5 ** (2.0 - alpha)
    )
    j = np.arange(-cells, cells + 1)
    j1, j2 = np.meshgrid(j, j, indexing="ij")
    far = np.maximum(np.abs(j1), np.abs(j2)) >= 2
    midpoint = float(np.sum(np.hypot(j1[far], j2[far]) ** (-alpha)))
    return exact - midpoint


def patch_coefficient(h: float, p: StableParams) -> float:
    """
    Coefficient c_h of the near-field 5-point correction.

    The Taylor expansion of the jump integral over the patch |y|∞ ≤ 3h/2 gives
    c_h Δf with c_h = ∫_patch |y|² ν(y) dy / (2d). The second moment that the
    midpoint far-field weights miss is added as well, so that the whole stencil
    reproduces ∫|y|²ν on quadratics.

    Args:
        h: Lattice spacing.
        p: Stable parameters.

    Returns:
        c_h, proportional to h^(2-α).
    """
    patch_integral = _square_moment(p.alpha) * (1.5 * h) ** (2.0 - p.alpha)
    defect = far_moment_defect(p.alpha) * h ** (2.0 - p.alpha)
    return p.A * (patch_integral + defect) / (2.0 * p.d)


def box_tail(
    points: np.ndarray,
    lower: Tuple[float, float],
    upper: Tuple[float, float],
    p: StableParams,
) -> np.ndarray:
    """
    Exact mass of ν(· - x) outside an axis-aligned box, for x inside the box.

    In polar coordinates about x the mass is (A/α)∫ρ(θ)^(-α) dθ with ρ(θ) the
    distance to the box edge; each side at perpendicular distance d contributes
    d^(-α) ∫cos^α φ dφ over the angles it subtends.

    Args:
        points: Points strictly inside the box, shape `(m, 2)`.
        lower: Lower-left box corner.
        upper: Upper-right box corner.
        p: Stable parameters.

    Returns:
        Exterior masses, shape `(m,)`.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = points[:, 0], points[:, 1]
    x0, y0 = lower
    x1, y1 = upper
    sides = (
        (x1 - x, y - y0, y1 - y),
        (x - x0, y1 - y, y - y0),
        (y1 - y, x1 - x, x - x0),
        (y - y0, x - x0, x1 - x),
    )
    total = np.zeros(len(points))
    for dist, below, above in sides:
        lo = -np.arctan(below / dist)
        hi = np.arctan(above / dist)
        total += dist ** (-p.alpha) * _integrate_cos_power(lo, hi, p.alpha)
    return p.A / p.alpha * total


@dataclass(frozen=True, eq=False)
class DiffusionOperator:
    """
    Discrete -Δ^(α/2) on the interior nodes of a grid, with zero exterior values.

    Attributes:
        matrix: Dense symmetric M-matrix K = -Δ^(α/2), interior by interior.
        killing: Per-node killing rate κ_i: the jump intensity towards exterior
            nodes and out of the bounding box, plus the boundary flux.
        grid: The grid the operator was assembled on.
        params: Stable parameters.
        patch: Near-field coefficient c_h.
    """

    matrix: np.ndarray = field(repr=False)
    killing: np.ndarray = field(repr=False)
    grid: Grid
    params: StableParams
    patch: float

    @property
    def size(self) -> int:
        """Number of interior nodes."""
        return self.matrix.shape[0]

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Applies Δ^(α/2), that is `-K f`."""
        return -(self.matrix @ f)

    def to_matrix_market(self, path: Union[str, Path]) -> Path:
        """
        Writes K in Matrix Market coordinate format.

        Args:
            path: Destination file.

        Returns:
            The path that was written.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        scipy.io.mmwrite(
            str(path),
            scipy.sparse.coo_matrix(self.matrix),
            comment=f"-Delta^(alpha/2), alpha={self.params.alpha}, h={self.grid.h}",
            precision=17,
        )
        return path


def _offset_stencil(grid: Grid, p: StableParams, patch: float) -> np.ndarray:
    """Weights W[o] for lattice offsets o, indexed from -(S-1) to S-1."""
    size = grid.shape[0]
    offsets = np.arange(-(size - 1), size)
    oi, oj = np.meshgrid(offsets, offsets, indexing="ij")
    far = np.maximum(np.abs(oi), np.abs(oj)) >= 2
    weights = np.zeros(oi.shape)
    r = grid.h * np.hypot(oi[far], oj[far])
    weights[far] = p.A * r ** (-p.d - p.alpha) * grid.h**2
    weights[(np.abs(oi) + np.abs(oj)) == 1] = patch / grid.h**2
    return weights


def boundary_flux(grid: Grid, patch: float) -> np.ndarray:
    """
    Extra killing of the nodes next to the boundary.

    The 5-point term puts the zero exterior value on the exterior neighbour,
    one spacing away. The boundary actually crosses that link at θh, so the
    flux to the crossing has weight c_h/(θh²). The excess c_h(1/θ - 1)/h² goes
    on the diagonal only, which keeps K symmetric and lets the eigenvalue
    follow the true boundary rather than the lattice staircase.

    Args:
        grid: The grid.
        patch: The coefficient c_h.

    Returns:
        Per-node flux, zero away from the boundary.
    """
    theta = np.clip(grid.link_fractions, BOUNDARY_FRACTION_FLOOR, 1.0)
    return patch / grid.h**2 * np.sum(1.0 / theta - 1.0, axis=1)


def assemble_fraclap(grid: Grid, p: StableParams) -> DiffusionOperator:
    """
    Assembles the discrete fractional Laplacian with Dirichlet exterior condition.

    Far cells (|j - i|∞ ≥ 2) carry the midpoint weight ν(x_j - x_i) h^d. The
    3x3 patch around each node is replaced by c_h times the 5-point Laplacian.
    Every lattice node in the bounding box, interior or exterior, contributes
    to the diagonal, and the mass of ν outside the box is added exactly. Nodes
    whose nearest-neighbour link is cut by the boundary get the `boundary_flux`.

    Args:
        grid: The grid.
        p: Stable parameters.

    Returns:
        The assembled operator.

    Example:
        Smallest eigenvalue of the drift-free problem on the unit disk.
        ```python
        import scipy.linalg
        from prefect_fracdrift.fractional_core import StableParams, assemble_fraclap
        from prefect_fracdrift.geometry import Domain, build_grid

        grid = build_grid(Domain.disk(1.0), h=0.1)
        op = assemble_fraclap(grid, StableParams(alpha=1.5))
        print(scipy.linalg.eigvalsh(op.matrix)[0])
        ```
    """
    patch = patch_coefficient(grid.h, p)
    stencil = _offset_stencil(grid, p, patch)
    size = grid.shape[0]
    ij = grid.interior_ij
    n = len(ij)

    # Box sums of the stencil: node i sees offsets j - i for every j in the box.
    summed = np.zeros((stencil.shape[0] + 1, stencil.shape[1] + 1))
    summed[1:, 1:] = stencil.cumsum(axis=0).cumsum(axis=1)
    lo = size - 1 - ij
    hi = lo + size
    box_sum = (
        summed[hi[:, 0], hi[:, 1]]
        - summed[lo[:, 0], hi[:, 1]]
        - summed[hi[:, 0], lo[:, 1]]
        + summed[lo[:, 0], lo[:, 1]]
    )

    matrix = np.empty((n, n))
    chunk = max(1, 4_000_000 // max(n, 1))
    for start in range(0, n, chunk):
        rows = ij[start : start + chunk]
        offsets = ij[None, :, :] - rows[:, None, :] + (size - 1)
        matrix[start : start + chunk] = -stencil[offsets[..., 0], offsets[..., 1]]
    interior_sum = -matrix.sum(axis=1)

    tail = box_tail(grid.interior_points, grid.lower, grid.upper, p)
    flux = boundary_flux(grid, patch)
    killing = box_sum - interior_sum + tail + flux
    matrix[np.diag_indices(n)] = box_sum + tail + flux
    logger.debug(
        "Assembled fractional Laplacian: n=%s, h=%s, c_h=%.6g, min killing=%.6g",
        n,
        grid.h,
        patch,
        killing.min(),
    )
    return DiffusionOperator(
        matrix=matrix, killing=killing, grid=grid, params=p, patch=patch
    )


def dirichlet_form(f: np.ndarray, g: np.ndarray, op: DiffusionOperator) -> float:
    """
    The Dirichlet form E^α(f, g) = (-Δ^(α/2) f, g) under the h^d inner product.

    Args:
        f: Interior field.
        g: Interior field.
        op: The diffusion operator.

    Returns:
        h^d fᵀ K g.

    Raises:
        ValueError: If a field does not match the operator's grid.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (op.size,) or g.shape != (op.size,):
        raise ValueError(
            f"Fields of shape {f.shape} and {g.shape} do not match an operator "
            f"on {op.size} interior nodes."
        )
    return op.grid.weight * float(f @ (op.matrix @ g))


def quadratic_form_from_weights(f: np.ndarray, op: DiffusionOperator) -> float:
    """
    E^α(f, f) written as a jump double sum plus the killing term.

    Returns ½ΣΣ(f_i - f_j)² W_ij h^d + Σ f_i² κ_i h^d, where W_ij are the jump
    weights of the assembled operator.
    """
    weights = -op.matrix.copy()
    np.fill_diagonal(weights, 0.0)
    diff = f[:, None] - f[None, :]
    jumps = 0.5 * np.sum(weights * diff**2)
    return op.grid.weight * float(jumps + np.sum(f**2 * op.killing))


def _kernel_nodes(t: float, p: StableParams) -> Tuple[np.ndarray, np.ndarray]:
    """Radial quadrature nodes in frequency, graded towards 0."""
    rho_max = KERNEL_CUTOFF * t ** (-1.0 / p.alpha)
    x, w = _gauss_legendre(KERNEL_PANEL_NODES)
    width = rho_max / KERNEL_PANELS
    # geometric refinement of the first panel, where e^{-tρ^α} is not smooth
    inner = width * 2.0 ** -np.arange(16, -1, -1)
    edges = np.concatenate([[0.0], inner, width * np.arange(2, KERNEL_PANELS + 1)])
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (b - a) * x + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w
    return nodes.ravel(), weights.ravel()


def _radial_transform(
    t: float, r: np.ndarray, p: StableParams, order: int
) -> np.ndarray:
    """Hankel transform of e^{-tρ^α} of order 0 or 1, evaluated at `r`."""
    rho, w = _kernel_nodes(t, p)
    bessel = special.j0 if order == 0 else special.j1
    damp = w * np.exp(-t * rho**p.alpha) * rho ** (1 + order)
    out = np.empty(r.shape)
    flat_r = r.ravel()
    flat_out = out.reshape(-1)
    chunk = 1024
    for start in range(0, flat_r.size, chunk):
        block = flat_r[start : start + chunk]
        flat_out[start : start + chunk] = bessel(np.outer(block, rho)) @ damp
    return out / (2.0 * math.pi)


def free_kernel(t: float, x: np.ndarray, p: StableParams) -> np.ndarray:
    """
    Transition density p_t(x) of the isotropic α-stable process.

    Computed by numerical Hankel inversion of e^(-t|ξ|^α):
    p_t(x) = (1/2π)∫_0^∞ e^(-tρ^α) J0(ρ|x|) ρ dρ, cut at ρ = 50 t^(-1/α).

    Args:
        t: Time, positive.
        x: Point(s), shape `(..., 2)`.
        p: Stable parameters.

    Returns:
        Density values, shape `x.shape[:-1]`.

    Raises:
        DomainError: If `t <= 0`.

    Example:
        ```python
        from prefect_fracdrift.fractional_core import StableParams, free_kernel

        free_kernel(0.5, [0.3, 0.0], StableParams(alpha=1.5))
        ```
    """
    if not t > 0:
        raise DomainError(f"The heat kernel needs t > 0, got t={t}.")
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    return _radial_transform(t, np.asarray(r), p, order=0)


def free_kernel_gradient(t: float, x: np.ndarray, p: StableParams) -> np.ndarray:
    """
    Gradient ∇p_t(x), computed from the radial derivative of the Hankel integral.

    Args:
        t: Time, positive.
        x: Point(s), shape `(..., 2)`.
        p: Stable parameters.

    Returns:
        Gradient vectors, shape `x.shape`.
    """
    if not t > 0:
        raise DomainError(f"The heat kernel needs t > 0, got t={t}.")
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    radial = -_radial_transform(t, np.asarray(r), p, order=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[..., None] > 0, x / r[..., None], 0.0)
    return radial[..., None] * unit


def symbol_accuracy(
    p: StableParams,
    h: float = 0.1,
    radius: float = 3.0,
    wavenumber: float = 2.0,
    width: float = 0.5,
    core_radius: float = 0.5,
) -> float:
    """
    Relative error of the discrete operator on a windowed plane wave.

    The field cos(k x1) exp(-|x|²/2w²) is supported well inside a disk of the
    given radius. The reference applies the exact symbol -|ξ|^α on a periodic
    lattice of the same spacing, so the comparison isolates the stencil.

    Args:
        p: Stable parameters.
        h: Lattice spacing.
        radius: Disk radius.
        wavenumber: Plane-wave wavenumber |ξ|.
        width: Gaussian window width.
        core_radius: Nodes closer than this to the center are compared.

    Returns:
        max |Lf - ref| / max |ref| over the compared nodes.
    """
    grid = build_grid(Domain.disk(radius), h)
    op = assemble_fraclap(grid, p)

    def windowed_wave(points):
        return np.cos(wavenumber * points[..., 0]) * np.exp(
            -np.sum(points**2, axis=-1) / (2.0 * width**2)
        )

    discrete = op.apply(grid.sample(windowed_wave))

    size = 1 << int(math.ceil(math.log2(4 * grid.shape[0])))
    axis = (np.arange(size) - size // 2 + 0.5) * h
    lattice = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    freq = 2.0 * math.pi * np.fft.fftfreq(size, d=h)
    k1, k2 = np.meshgrid(freq, freq, indexing="ij")
    spectrum = np.fft.fft2(windowed_wave(lattice))
    reference_full = np.real(
        np.fft.ifft2(-np.hypot(k1, k2) ** p.alpha * spectrum)
    )

    offset = size // 2 - grid.shape[0] // 2
    reference = reference_full[
        offset : offset + grid.shape[0], offset : offset + grid.shape[1]
    ][grid.interior]
    core = np.hypot(*grid.interior_points.T) < core_radius
    error = np.max(np.abs(discrete[core] - reference[core]))
    return float(error / np.max(np.abs(reference[core])))
