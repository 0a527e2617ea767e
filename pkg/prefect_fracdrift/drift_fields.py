"""
Divergence-free vector fields, the discrete drift operator b·∇ and the
certificates that tell whether a field is discretely divergence-free.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse
from prefect.logging import get_logger
from scipy.interpolate import RegularGridInterpolator

from prefect_fracdrift.exceptions import DomainError
from prefect_fracdrift.fractional_core import StableParams, patch_coefficient
from prefect_fracdrift.geometry import Grid

logger = get_logger("prefect_fracdrift.drift_fields")

#: Support radius of the default rotational profile.
DEFAULT_PROFILE_RADIUS = 0.8


class FieldKind(Enum):
    """The families of shipped vector fields."""

    ROTATIONAL = "rotational"
    STREAM = "stream"
    CONSTANT = "constant"
    STREAM_TABLE = "custom-stream-table"
    COMPRESSIBLE = "compressible"


class Stencil(Enum):
    """Discretizations of b·∇ on the lattice."""

    AUTO = "auto"
    LATTICE = "lattice"
    ORBIT = "orbit"


@dataclass(frozen=True, eq=False)
class VectorField:
    """
    A planar vector field b.

    Attributes:
        kind: The family the field belongs to.
        evaluator: Maps points of shape `(..., 2)` to velocities of the same shape.
        divergence_free: Whether the field is divergence-free analytically.
        center: Rotation center for rotational fields.
        profile: Profile p(s) of a rotational field, evaluated at s = |x - c|².
        bounded: Whether the field is bounded on the whole plane.
        nodal: Velocities at every node of `grid`, for fields defined on a grid.
        grid: The grid `nodal` lives on.
    """

    kind: FieldKind
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    divergence_free: bool = True
    center: Tuple[float, float] = (0.0, 0.0)
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = field(
        default=None, repr=False
    )
    bounded: bool = True
    nodal: Optional[np.ndarray] = field(default=None, repr=False)
    grid: Optional[Grid] = field(default=None, repr=False)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluates the field at `points`."""
        return self.evaluator(np.asarray(points, dtype=float))

    def on_nodes(self, grid: Grid) -> np.ndarray:
        """Velocities at every node of `grid`, shape `grid.shape + (2,)`."""
        if self.nodal is not None and self.grid is not None:
            if not grid.same_lattice(self.grid):
                raise DomainError("Field was sampled on a different lattice.")
            return self.nodal
        return self(grid.nodes)


def compact_profile(radius: float = DEFAULT_PROFILE_RADIUS) -> Callable:
    """The profile p(s) = (1 - s/R²)³ for s < R², zero beyond."""

    def profile(s):
        return np.clip(1.0 - np.asarray(s) / radius**2, 0.0, None) ** 3

    return profile


def rotational_field(
    center: Sequence[float] = (0.0, 0.0),
    profile: Optional[Callable] = None,
    bounded: Optional[bool] = None,
) -> VectorField:
    """
    A field tangent to the circles about `center`.

    Args:
        center: Rotation center.
        profile: Angular speed p as a function of s = |x - c|²; defaults to
            the constant 1 (rigid rotation).
        bounded: Whether the field is bounded on the plane. Defaults to False for
            rigid rotation and True otherwise.

    Returns:
        b(x) = p(|x - c|²)·(-(x₂ - c₂), x₁ - c₁).

    Example:
        ```python
        from prefect_fracdrift.drift_fields import compact_profile, rotational_field

        b = rotational_field(profile=compact_profile(0.8))
        b([[0.5, 0.0]])
        ```
    """
    c = np.asarray(center, dtype=float)
    rigid = profile is None
    p = (lambda s: np.ones_like(np.asarray(s, dtype=float))) if rigid else profile

    def evaluator(points):
        rel = points - c
        speed = p(np.sum(rel**2, axis=-1))
        return np.stack([-speed * rel[..., 1], speed * rel[..., 0]], axis=-1)

    return VectorField(
        kind=FieldKind.ROTATIONAL,
        evaluator=evaluator,
        center=tuple(c),
        profile=p,
        bounded=(not rigid) if bounded is None else bounded,
    )


def constant_field(direction: Sequence[float] = (1.0, 0.0)) -> VectorField:
    """The constant field b ≡ `direction`."""
    d = np.asarray(direction, dtype=float)

    def evaluator(points):
        return np.broadcast_to(d, points.shape).copy()

    return VectorField(kind=FieldKind.CONSTANT, evaluator=evaluator)


def compressible_field() -> VectorField:
    """The control field b = (x₁, 0), whose divergence is 1."""

    def evaluator(points):
        return np.stack([points[..., 0], np.zeros(points.shape[:-1])], axis=-1)

    return VectorField(
        kind=FieldKind.COMPRESSIBLE,
        evaluator=evaluator,
        divergence_free=False,
        bounded=False,
    )


def _centered(full: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered difference along `axis`, with zero values beyond the lattice."""
    padded = np.pad(full, 1)
    core = [slice(1, -1), slice(1, -1)]
    ahead, behind = list(core), list(core)
    ahead[axis] = slice(2, None)
    behind[axis] = slice(None, -2)
    return (padded[tuple(ahead)] - padded[tuple(behind)]) / (2.0 * h)


def stream_field(
    psi: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
    grid: Grid,
    kind: FieldKind = FieldKind.STREAM,
) -> VectorField:
    """
    The discrete curl b = (D₂ψ, -D₁ψ) of a stream function.

    Centered differences commute, so the centered divergence of the result
    vanishes up to rounding.

    Args:
        psi: Stream function values at every node, shape `grid.shape`, or a
            callable evaluated on the nodes.
        grid: The grid.
        kind: Field kind to record, `STREAM` or `STREAM_TABLE`.

    Returns:
        A field sampled on the grid; off-grid values use bilinear interpolation.

    Raises:
        DomainError: If ψ is nonzero on an exterior node or has the wrong shape.
    """
    values = psi(grid.nodes) if callable(psi) else psi
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise DomainError(
            f"Stream function of shape {values.shape} does not match {grid.shape}."
        )
    scale = max(float(np.max(np.abs(values))), 1.0)
    if np.any(np.abs(values[~grid.interior]) > 1e-12 * scale):
        raise DomainError("Stream function must vanish on exterior nodes.")
    values = np.where(grid.interior, values, 0.0)

    nodal = np.stack(
        [_centered(values, 1, grid.h), -_centered(values, 0, grid.h)], axis=-1
    )
    interpolators = [
        RegularGridInterpolator(
            grid.axes, nodal[..., k], bounds_error=False, fill_value=0.0
        )
        for k in (0, 1)
    ]

    def evaluator(points):
        return np.stack([interp(points) for interp in interpolators], axis=-1)

    return VectorField(kind=kind, evaluator=evaluator, nodal=nodal, grid=grid)


def load_stream_table(path: Union[str, Path], grid: Grid) -> VectorField:
    """
    Reads a stream function from a CSV table with header `x1,x2,psi`.

    Points must be lattice nodes of `grid`; nodes missing from the table get ψ = 0.

    Args:
        path: CSV file.
        grid: The grid the table is aligned with.

    Returns:
        The stream field of the tabulated ψ.

    Raises:
        DomainError: If a row is not a lattice node.
    """
    table = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    table = np.atleast_1d(table)
    points = np.column_stack([table["x1"], table["x2"]])
    position = (points - np.asarray(grid.lower)) / grid.h - 0.5
    ij = np.rint(position).astype(int)
    misaligned = np.abs(position - ij).max(axis=1) > 1e-6
    outside = np.any((ij < 0) | (ij >= np.asarray(grid.shape)), axis=1)
    if np.any(misaligned | outside):
        bad = points[np.argmax(misaligned | outside)]
        raise DomainError(f"Stream table point {tuple(bad)} is not a lattice node.")
    psi = np.zeros(grid.shape)
    psi[ij[:, 0], ij[:, 1]] = table["psi"]
    logger.debug("Loaded %s stream table rows from %s", len(table), path)
    return stream_field(psi, grid, kind=FieldKind.STREAM_TABLE)


def nodal_divergence(grid: Grid, b: VectorField) -> np.ndarray:
    """Centered divergence D₁b₁ + D₂b₂ at every interior node."""
    nodal = b.on_nodes(grid)
    div = _centered(nodal[..., 0], 0, grid.h) + _centered(nodal[..., 1], 1, grid.h)
    return div[grid.interior]


def divergence_certificate(grid: Grid, b: VectorField) -> float:
    """
    Largest centered discrete divergence over the interior nodes.

    Args:
        grid: The grid.
        b: The field.

    Returns:
        max_i |(D₁b₁ + D₂b₂)(x_i)|.
    """
    return float(np.max(np.abs(nodal_divergence(grid, b))))


def peclet_threshold(grid: Grid, p: StableParams) -> float:
    """
    Largest A‖b‖∞ for which K - A·B keeps nonpositive off-diagonal entries.

    With the lattice stencil the nearest-neighbour entry of K - A·B is
    -c_h/h² ± A b̄/(2h), so the bound is 2c_h/h. Beyond it the combined
    operator adds `peclet_stabilization`.
    """
    return 2.0 * patch_coefficient(grid.h, p) / grid.h


def skewness_defect(matrix) -> float:
    """The max-norm of B + Bᵀ for a dense or sparse matrix."""
    total = matrix + matrix.T
    if scipy.sparse.issparse(total):
        total = total.tocoo()
        return float(np.max(np.abs(total.data), initial=0.0))
    return float(np.max(np.abs(total), initial=0.0))


@dataclass(frozen=True, eq=False)
class DriftOperator:
    """
    The discrete drift A·b·∇ on interior nodes, with zero exterior values.

    Attributes:
        unit: Sparse matrix of b·∇ at amplitude 1.
        amplitude: The amplitude A.
        vector_field: The field the operator discretizes.
        grid: The grid.
        stencil: The stencil used.
    """

    unit: scipy.sparse.csr_matrix = field(repr=False)
    amplitude: float
    vector_field: VectorField = field(repr=False)
    grid: Grid = field(repr=False)
    stencil: Stencil = Stencil.LATTICE

    @property
    def matrix(self) -> scipy.sparse.csr_matrix:
        """The matrix B = A·(b·∇)."""
        return (self.amplitude * self.unit).tocsr()

    def with_amplitude(self, amplitude: float) -> "DriftOperator":
        """The same discretization at another amplitude."""
        return DriftOperator(
            unit=self.unit,
            amplitude=float(amplitude),
            vector_field=self.vector_field,
            grid=self.grid,
            stencil=self.stencil,
        )

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Applies B to an interior field."""
        return self.amplitude * (self.unit @ f)

    @property
    def is_zero(self) -> bool:
        """Whether B vanishes identically."""
        return self.amplitude == 0.0 or self.unit.count_nonzero() == 0


def peclet_stabilization(
    diffusion: np.ndarray, drift: Optional[DriftOperator]
) -> scipy.sparse.csr_matrix:
    """
    Symmetric graph Laplacian S that keeps K + S - A·B a Z-matrix at any A.

    On each stencil pair of the drift, s_ij = max(0, |A|·max(|B_ij|, |B_ji|) +
    K_ij) is the part of the drift coefficient that the jump weight -K_ij cannot
    absorb. S has off-diagonal entries -s_ij and zero row sums, so it adds no
    killing and leaves B skew. Its support is the drift stencil, so S
    annihilates every field that is constant along the stencil pairs; for the
    orbit stencil these are the orbit-constant fields. Below `peclet_threshold`
    every s_ij is zero.

    Args:
        diffusion: The dense matrix K.
        drift: The drift operator, amplitude included, or None.

    Returns:
        S as a sparse matrix; it depends on A only through |A|.
    """
    n = diffusion.shape[0]
    if drift is None or drift.is_zero:
        return scipy.sparse.csr_matrix((n, n))
    magnitude = abs(drift.unit)
    magnitude = magnitude.maximum(magnitude.T).tocoo()
    off = magnitude.row != magnitude.col
    rows, cols = magnitude.row[off], magnitude.col[off]
    excess = abs(drift.amplitude) * magnitude.data[off] + diffusion[rows, cols]
    active = excess > 0.0
    if not active.any():
        return scipy.sparse.csr_matrix((n, n))
    rows, cols, excess = rows[active], cols[active], excess[active]
    logger.debug(
        "Peclet stabilization active on %s stencil pairs at A=%s",
        len(excess) // 2,
        drift.amplitude,
    )
    laplacian = scipy.sparse.coo_matrix((-excess, (rows, cols)), shape=(n, n))
    degree = scipy.sparse.diags(np.bincount(rows, weights=excess, minlength=n))
    return (laplacian + degree).tocsr()


def _orbit_applicable(grid: Grid, b: VectorField) -> bool:
    """Whether the orbit stencil can discretize `b` on `grid`."""
    return (
        b.kind is FieldKind.ROTATIONAL
        and grid.domain.is_square_symmetric
        and np.allclose(b.center, grid.domain.center)
    )


def _orbit_matrix(grid: Grid, b: VectorField) -> scipy.sparse.csr_matrix:
    """Skew cyclic differences along each orbit, weighted by the angular speed."""
    rows, cols, vals = [], [], []
    center = np.asarray(b.center)
    for orbit in grid.lattice_orbits():
        m = len(orbit)
        s = float(np.sum((grid.interior_points[orbit[0]] - center) ** 2))
        w = float(b.profile(np.array(s))) * m / (4.0 * math.pi)
        if w == 0.0:
            continue
        ahead = np.roll(orbit, -1)
        rows.extend([orbit, ahead])
        cols.extend([ahead, orbit])
        vals.extend([np.full(m, w), np.full(m, -w)])
    n = grid.n_interior
    if not rows:
        return scipy.sparse.csr_matrix((n, n))
    return scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()


def _lattice_matrix(grid: Grid, b: VectorField) -> scipy.sparse.csr_matrix:
    """Centered differences of b·∇ between interior neighbours."""
    nodal = b.on_nodes(grid)
    ij = grid.interior_ij
    n = grid.n_interior
    rows, cols, vals = [], [], []
    for k in (0, 1):
        for step in (1, -1):
            nb = ij.copy()
            nb[:, k] += step
            inside = np.all((nb >= 0) & (nb < np.asarray(grid.shape)), axis=1)
            src, nb = ij[inside], nb[inside]
            target = grid.index[nb[:, 0], nb[:, 1]]
            keep = target >= 0
            src, nb, target = src[keep], nb[keep], target[keep]
            weight = (nodal[src[:, 0], src[:, 1], k] + nodal[nb[:, 0], nb[:, 1], k]) / (
                4.0 * grid.h
            )
            rows.append(grid.index[src[:, 0], src[:, 1]])
            cols.append(target)
            vals.append(step * weight)
    div = nodal_divergence(grid, b)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(-0.5 * div)
    return scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()


def assemble_drift(
    grid: Grid,
    b: VectorField,
    A: float,
    stencil: Union[Stencil, str] = Stencil.AUTO,
    params: Optional[StableParams] = None,
) -> DriftOperator:
    """
    Assembles the drift operator A·b·∇ with zero exterior values.

    The lattice stencil uses the averaged coefficient ½(b_i + b_j) on each
    nearest-neighbour pair and -½ times the centered divergence on the
    diagonal, so B + Bᵀ = -diag(div b). The orbit stencil, used by default for
    rotational fields about the center of a square-symmetric grid, takes the
    centered angular difference along each lattice orbit; it is exactly skew and
    annihilates every function constant on orbits.

    Args:
        grid: The grid.
        b: The field.
        A: Amplitude.
        stencil: `auto`, `lattice` or `orbit`.
        params: Stable parameters; when given, a grid Péclet number above
            `peclet_threshold` is logged as a warning.

    Returns:
        The drift operator.

    Raises:
        DomainError: If the orbit stencil is requested for a field or grid it
            does not apply to.

    Example:
        ```python
        from prefect_fracdrift.drift_fields import assemble_drift, constant_field
        from prefect_fracdrift.geometry import Domain, build_grid

        grid = build_grid(Domain.disk(1.0), h=0.05)
        drift = assemble_drift(grid, constant_field((1.0, 0.0)), A=4.0)
        ```
    """
    stencil = Stencil(stencil)
    if stencil is Stencil.AUTO:
        stencil = Stencil.ORBIT if _orbit_applicable(grid, b) else Stencil.LATTICE
    if stencil is Stencil.ORBIT:
        if not _orbit_applicable(grid, b):
            raise DomainError(
                "The orbit stencil needs a rotational field about the center "
                "of a square-symmetric grid."
            )
        unit = _orbit_matrix(grid, b)
    else:
        unit = _lattice_matrix(grid, b)

    if params is not None and stencil is Stencil.LATTICE:
        check_peclet(grid, b, A, params)
    return DriftOperator(
        unit=unit, amplitude=float(A), vector_field=b, grid=grid, stencil=stencil
    )


def check_peclet(grid: Grid, b: VectorField, A: float, p: StableParams) -> bool:
    """
    Logs a warning when A‖b‖∞ exceeds `peclet_threshold`.

    Returns:
        Whether K - A·B is an M-matrix without `peclet_stabilization`.
    """
    sup = float(np.max(np.abs(b.on_nodes(grid)[grid.interior]), initial=0.0))
    threshold = peclet_threshold(grid, p)
    if abs(A) * sup <= threshold:
        return True
    logger.warning(
        "Grid Peclet number too large: A*|b| = %.4g exceeds 2c_h/h = %.4g; "
        "the symmetric stabilization adds numerical diffusion, refine h.",
        abs(A) * sup,
        threshold,
    )
    return False
