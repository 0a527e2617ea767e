"""
Perturbation series for the heat kernel of Δ^(α/2) + b·∇ in the whole plane.

Terms n ≥ 1 follow the Duhamel recursion

    p_n(t, x, ·) = -∫_0^t P_(t-s) T p_(n-1)(s, x, ·) ds

on a periodic spectral lattice, with the skew transport T g = ½(b·∇g + ∇·(bg)).
T is exactly antisymmetric on the lattice and the time nodes are symmetric about
t/2, so p_1(t, x, y) = -p_1(t, y, x) holds to rounding. For n ≥ 2 the alternation
p_n(t, x, y) = (-1)^n p_n(t, y, x) holds up to the error of the nested quadrature.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from prefect.logging import get_logger
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from prefect_fracdrift.drift_fields import VectorField
from prefect_fracdrift.exceptions import DomainError, QuadratureError
from prefect_fracdrift.fractional_core import StableParams, free_kernel
from prefect_fracdrift.utilities import write_csv

logger = get_logger("prefect_fracdrift.kernel_series")

MAX_TERMS = 3
MAX_TIME = 2.0
POINT_HEADER = ("n", "t", "x1", "x2", "y1", "y2", "value")
#: Half-width of the box over which the series mass is summed.
MASS_BOX_RADIUS = 30.0
MASS_SPACING = 0.1
#: Radial step of the free kernel table interpolated onto the mass lattice.
RADIAL_TABLE_SPACING = 0.01


@dataclass(frozen=True)
class SeriesResolution:
    """
    Quadrature resolution of the series terms.

    Attributes:
        nodes: Time nodes per recursion level, split evenly between the two
            halves of (0, t).
        fft_size: Points per axis of the spectral lattice.
        tolerance: Largest relative change accepted between `nodes/2` and `nodes`.
        refinements: How many times `nodes` may be doubled before giving up.
    """

    nodes: int = 64
    fft_size: int = 128
    tolerance: float = 0.05
    refinements: int = 2

    def __post_init__(self):
        if self.nodes < 4 or self.nodes % 4:
            raise DomainError("Series nodes must be a positive multiple of 4.")
        if self.fft_size < 16 or self.fft_size % 2:
            raise DomainError("FFT size must be an even number of at least 16.")


@dataclass(frozen=True, eq=False)
class SpectralLattice:
    """
    Periodic lattice carrying densities through their discrete Fourier transform.

    Attributes:
        origin: Coordinates of lattice node (0, 0).
        spacing: Lattice spacing.
        size: Points per axis.
        half_width: Half-width of the periodic cell about its center.
        velocity: Field values on the lattice, shape `(size, size, 2)`.
        symbol: |ξ|^α on the Fourier lattice.
        wavenumbers: ξ₁ and ξ₂ along each axis, Nyquist mode zeroed.
    """

    origin: np.ndarray
    spacing: float
    size: int
    half_width: float
    velocity: np.ndarray = field(repr=False)
    symbol: np.ndarray = field(repr=False)
    wavenumbers: Tuple[np.ndarray, np.ndarray] = field(repr=False)

    @property
    def is_still(self) -> bool:
        """Whether the field vanishes on the lattice."""
        return not np.any(self.velocity)

    def delta(self, x: Sequence[float]) -> np.ndarray:
        """Spectrum of the band-limited point mass at `x`."""
        k1, k2 = self.wavenumbers
        rel = np.asarray(x, dtype=float) - self.origin
        phase = np.exp(-1j * k1 * rel[0])[:, None] * np.exp(-1j * k2 * rel[1])[None, :]
        return self._mask(phase) / self.spacing**2

    def heat(self, spectrum: np.ndarray, tau: float) -> np.ndarray:
        """Applies the free semigroup P_τ."""
        return spectrum * np.exp(-tau * self.symbol)

    def transport(self, spectrum: np.ndarray) -> np.ndarray:
        """Applies T g = ½(b·∇g + ∇·(bg)) in spectral form."""
        k1, k2 = self.wavenumbers
        g = np.real(np.fft.ifft2(spectrum))
        g1 = np.real(np.fft.ifft2(1j * k1[:, None] * spectrum))
        g2 = np.real(np.fft.ifft2(1j * k2[None, :] * spectrum))
        b1, b2 = self.velocity[..., 0], self.velocity[..., 1]
        advective = np.fft.fft2(b1 * g1 + b2 * g2)
        conservative = 1j * k1[:, None] * np.fft.fft2(b1 * g)
        conservative += 1j * k2[None, :] * np.fft.fft2(b2 * g)
        return 0.5 * (advective + conservative)

    def evaluate(self, spectrum: np.ndarray, y: Sequence[float]) -> float:
        """Fourier interpolation of the density at `y`."""
        k1, k2 = self.wavenumbers
        rel = np.asarray(y, dtype=float) - self.origin
        e1 = np.exp(1j * k1 * rel[0])
        e2 = np.exp(1j * k2 * rel[1])
        return float(np.real(e1 @ self._mask(spectrum) @ e2)) / self.size**2

    def density(self, spectrum: np.ndarray) -> np.ndarray:
        """Density values at the lattice nodes."""
        return np.real(np.fft.ifft2(self._mask(spectrum)))

    def mass(self, spectrum: np.ndarray) -> float:
        """Lattice sum of the density over the periodic cell times the cell area."""
        return float(np.sum(self.density(spectrum))) * self.spacing**2

    def _mask(self, spectrum: np.ndarray) -> np.ndarray:
        """Zeroes the Nyquist row and column."""
        nyquist = self.size // 2
        masked = spectrum.copy()
        masked[nyquist, :] = 0.0
        masked[:, nyquist] = 0.0
        return masked


def build_lattice(
    t: float,
    x: Sequence[float],
    y: Sequence[float],
    b: VectorField,
    p: StableParams,
    fft_size: int = 128,
) -> SpectralLattice:
    """
    Lattice centred at (x+y)/2 with half-width 8 t^(1/α) + |x - y|.

    Raises:
        DomainError: If the field is unbounded on the plane.
    """
    if not b.bounded:
        raise DomainError(
            f"The {b.kind.value} field is unbounded on the plane; "
            "the series needs a bounded field."
        )
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    half_width = 8.0 * t ** (1.0 / p.alpha) + float(np.hypot(*(x - y)))
    spacing = 2.0 * half_width / fft_size
    center = 0.5 * (x + y)
    origin = center - half_width + 0.5 * spacing
    axis = np.arange(fft_size) * spacing
    nodes = np.stack(
        np.meshgrid(origin[0] + axis, origin[1] + axis, indexing="ij"), axis=-1
    )
    freq = 2.0 * math.pi * np.fft.fftfreq(fft_size, d=spacing)
    wave = freq.copy()
    wave[fft_size // 2] = 0.0
    symbol = np.hypot(freq[:, None], freq[None, :]) ** p.alpha
    return SpectralLattice(
        origin=origin,
        spacing=spacing,
        size=fft_size,
        half_width=half_width,
        velocity=np.asarray(b(nodes), dtype=float),
        symbol=symbol,
        wavenumbers=(wave, wave),
    )


@lru_cache(maxsize=None)
def time_nodes(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodes and weights on (0, 1) for ∫_0^1 f(s) ds, symmetric about 1/2.

    Each half uses Gauss-Legendre in u with s = u²/2 near 0 and s = 1 - u²/2 near 1.
    """
    u, w = np.polynomial.legendre.leggauss(nodes // 2)
    u = 0.5 * (u + 1.0)
    w = 0.5 * w * u
    s = 0.5 * u**2
    return np.concatenate([s, 1.0 - s]), np.concatenate([w, w])


def _term_spectrum(
    n: int, t: float, lattice: SpectralLattice, source: np.ndarray, nodes: int
) -> np.ndarray:
    """Spectrum of p_n(t, x, ·) given the spectrum of the point mass at x."""
    if n == 0:
        return lattice.heat(source, t)
    s, w = time_nodes(nodes)
    total = np.zeros_like(source)
    for s_q, w_q in zip(t * s, t * w):
        inner = _term_spectrum(n - 1, s_q, lattice, source, nodes)
        total -= w_q * lattice.heat(lattice.transport(inner), t - s_q)
    return total


def _check_arguments(n: int, t: float):
    """Validates the series order and time."""
    if not 0 <= n <= MAX_TERMS:
        raise DomainError(f"Series terms are supported for 0 <= n <= {MAX_TERMS}.")
    if not 0.0 < t <= MAX_TIME:
        raise DomainError(f"Series time must lie in (0, {MAX_TIME}], got t={t}.")


def _refined_value(
    n: int,
    t: float,
    x: Sequence[float],
    y: Sequence[float],
    lattice: SpectralLattice,
    resolution: SeriesResolution,
    floor: float,
) -> Tuple[float, int]:
    """p_n(t, x, y) with nodes doubled until `nodes/2` and `nodes` agree."""
    source = lattice.delta(x)
    state = {"nodes": resolution.nodes}

    for attempt in Retrying(
        stop=stop_after_attempt(resolution.refinements + 1),
        retry=retry_if_exception_type(QuadratureError),
        reraise=True,
    ):
        with attempt:
            nodes = resolution.nodes * 2 ** (attempt.retry_state.attempt_number - 1)
            state["nodes"] = nodes
            coarse = lattice.evaluate(
                _term_spectrum(n, t, lattice, source, nodes // 2), y
            )
            fine = lattice.evaluate(_term_spectrum(n, t, lattice, source, nodes), y)
            scale = max(abs(fine), floor)
            if abs(fine - coarse) > resolution.tolerance * scale:
                logger.debug(
                    "p_%s refinement at %s nodes: coarse=%.6g fine=%.6g",
                    n,
                    nodes,
                    coarse,
                    fine,
                )
                raise QuadratureError(coarse, fine, resolution.tolerance)
    return fine, state["nodes"]


def series_term(
    n: int,
    t: float,
    x: Sequence[float],
    y: Sequence[float],
    b: VectorField,
    p: StableParams,
    resolution: SeriesResolution = SeriesResolution(),
) -> float:
    """
    The n-th perturbation term p_n(t, x, y).

    Args:
        n: Term index, at most 3.
        t: Time in (0, 2].
        x: Start point.
        y: End point.
        b: A bounded field.
        p: Stable parameters.
        resolution: Quadrature resolution.

    Returns:
        The signed density; `free_kernel(t, y - x)` for n = 0.

    Raises:
        DomainError: If `n`, `t` or the field are out of range.
        QuadratureError: If refinements keep disagreeing.

    Example:
        ```python
        from prefect_fracdrift.drift_fields import compact_profile, rotational_field
        from prefect_fracdrift.fractional_core import StableParams
        from prefect_fracdrift.kernel_series import series_term

        b = rotational_field(profile=compact_profile(0.8))
        series_term(1, 0.5, (0.2, 0.0), (0.0, 0.2), b, StableParams(alpha=1.5))
        ```
    """
    _check_arguments(n, t)
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    p0 = float(free_kernel(t, y - x, p))
    if n == 0:
        return p0
    lattice = build_lattice(t, x, y, b, p, resolution.fft_size)
    if lattice.is_still:
        return 0.0
    value, _ = _refined_value(n, t, x, y, lattice, resolution, 1e-3 * p0)
    return value


@dataclass
class SeriesEvaluation:
    """
    Partial sums of the perturbation series at one pair of points.

    Attributes:
        t: Time.
        x: Start point.
        y: End point.
        terms: p_0 .. p_N.
        resolution: Lattice spacing, half-width, time nodes per term and the
            bound on the free kernel mass outside the lattice cell.
    """

    t: float
    x: Tuple[float, float]
    y: Tuple[float, float]
    terms: List[float]
    resolution: Dict[str, object] = field(default_factory=dict)

    @property
    def partial_sum(self) -> float:
        """p̃_N, the sum of the computed terms."""
        return float(sum(self.terms))

    @property
    def ratio(self) -> float:
        """p̃_N / p_0."""
        return self.partial_sum / self.terms[0]

    def point_rows(self) -> Iterable[Tuple]:
        """Rows `n,t,x1,x2,y1,y2,value` for each term."""
        for n, value in enumerate(self.terms):
            yield (n, self.t, *self.x, *self.y, value)


def tail_bound(t: float, radius: float, p: StableParams) -> float:
    """Bound 2πA t R^(-α)/α on the free kernel mass beyond radius R."""
    return 2.0 * math.pi * p.A * t * radius ** (-p.alpha) / p.alpha


def kernel_sum(
    t: float,
    x: Sequence[float],
    y: Sequence[float],
    b: VectorField,
    N: int,
    p: StableParams,
    resolution: SeriesResolution = SeriesResolution(),
) -> SeriesEvaluation:
    """
    Terms p_0 .. p_N and the partial sum p̃_N at (t, x, y).

    Raises:
        DomainError: If `N`, `t` or the field are out of range.
        QuadratureError: Propagated from the refinement of any term.
    """
    _check_arguments(N, t)
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    p0 = float(free_kernel(t, y - x, p))
    terms = [p0]
    record: Dict[str, object] = {"nodes": []}
    if N > 0:
        lattice = build_lattice(t, x, y, b, p, resolution.fft_size)
        record.update(
            spacing=lattice.spacing,
            half_width=lattice.half_width,
            fft_size=lattice.size,
            tail_bound=tail_bound(t, lattice.half_width, p),
        )
        for n in range(1, N + 1):
            if lattice.is_still:
                terms.append(0.0)
                continue
            value, nodes = _refined_value(
                n, t, x, y, lattice, resolution, 1e-3 * p0
            )
            terms.append(value)
            record["nodes"].append(nodes)
    return SeriesEvaluation(
        t=float(t), x=tuple(x), y=tuple(y), terms=terms, resolution=record
    )


def negated(b: VectorField) -> VectorField:
    """The field -b."""
    evaluator = b.evaluator
    nodal = None if b.nodal is None else -b.nodal
    return dataclasses.replace(b, evaluator=lambda pts: -evaluator(pts), nodal=nodal)


def hash_series(
    t: float,
    x: Sequence[float],
    y: Sequence[float],
    b: VectorField,
    N: int,
    p: StableParams,
    resolution: SeriesResolution = SeriesResolution(),
) -> SeriesEvaluation:
    """
    The series of the dual process, driven by -b, at (t, x, y).

    Term by term it equals `kernel_sum(t, y, x, b, ...)`, exactly for n ≤ 1 and up
    to the nested quadrature error beyond.
    """
    return kernel_sum(t, x, y, negated(b), N, p, resolution)


def free_kernel_box_mass(
    t: float,
    p: StableParams,
    radius: float = MASS_BOX_RADIUS,
    spacing: float = MASS_SPACING,
) -> float:
    """
    Lattice sum of p_t over the box |y|∞ ≤ radius, times the cell area.

    p_t is tabulated on a radial grid and interpolated to the cell centres. The
    sum misses the heavy tail beyond the box, a little under
    `tail_bound(t, radius)`.

    Args:
        t: Time, positive.
        p: Stable parameters.
        radius: Half-width of the box.
        spacing: Lattice spacing.

    Returns:
        The truncated mass.
    """
    cells = int(round(radius / spacing))
    axis = (np.arange(-cells, cells) + 0.5) * spacing
    r = np.hypot(axis[:, None], axis[None, :])
    step = RADIAL_TABLE_SPACING
    table_r = np.arange(0.0, float(r.max()) + 2.0 * step, step)
    table = free_kernel(t, np.column_stack([table_r, np.zeros_like(table_r)]), p)
    return float(np.sum(np.interp(r, table_r, table))) * spacing**2


def series_mass(
    t: float,
    x: Sequence[float],
    b: VectorField,
    N: int,
    p: StableParams,
    resolution: SeriesResolution = SeriesResolution(),
    dual: bool = False,
) -> float:
    """
    Lattice mass of p̃_N(t, x, ·), or of p̃_N(t, ·, x) when `dual` is set.

    The free term is summed over the box of half-width `MASS_BOX_RADIUS` about
    x by `free_kernel_box_mass`. Each term n ≥ 1 is summed over the nodes of its
    spectral lattice, whose cell lies inside that box. The dual mass integrates
    over the start point; it is the mass of the series driven by -b started at x.
    """
    _check_arguments(N, t)
    mass = free_kernel_box_mass(t, p)
    if N == 0:
        return mass
    field_ = negated(b) if dual else b
    lattice = build_lattice(t, x, x, field_, p, resolution.fft_size)
    if lattice.is_still:
        return mass
    source = lattice.delta(x)
    for n in range(1, N + 1):
        mass += lattice.mass(_term_spectrum(n, t, lattice, source, resolution.nodes))
    return mass


def write_point_values(
    evaluations: Iterable[SeriesEvaluation], path: Union[str, Path]
) -> Path:
    """Writes series terms as CSV rows `n,t,x1,x2,y1,y2,value`."""
    rows = [row for evaluation in evaluations for row in evaluation.point_rows()]
    return write_csv(path, POINT_HEADER, rows)
