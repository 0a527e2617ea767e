"""Run configuration block for the fractional drift lab."""

import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from prefect.blocks.core import Block
from pydantic import VERSION as PYDANTIC_VERSION

if PYDANTIC_VERSION.startswith("2."):
    from pydantic.v1 import BaseModel, Field, ValidationError, validator
else:
    from pydantic import BaseModel, Field, ValidationError, validator

from prefect_fracdrift.drift_fields import (
    FieldKind,
    Stencil,
    VectorField,
    compact_profile,
    compressible_field,
    constant_field,
    load_stream_table,
    rotational_field,
    stream_field,
)
from prefect_fracdrift.exceptions import ConfigError
from prefect_fracdrift.fractional_core import StableParams
from prefect_fracdrift.geometry import Domain, DomainKind, Grid, build_grid
from prefect_fracdrift.kernel_series import MAX_TERMS, SeriesResolution
from prefect_fracdrift.mc_validator import DriftScheme, PathConfig, StartDistribution
from prefect_fracdrift.utilities import FLOAT_FORMAT, stable_hash

#: Flat key -> attribute path inside `RunConfig`.
FLAT_KEYS: Dict[str, Tuple[str, ...]] = {
    "domain.kind": ("domain", "kind"),
    "domain.center": ("domain", "center"),
    "domain.radius": ("domain", "radius"),
    "domain.inner_radius": ("domain", "inner_radius"),
    "domain.half_widths": ("domain", "half_widths"),
    "domain.corner_radius": ("domain", "corner_radius"),
    "alpha": ("alpha",),
    "grid.h": ("grid", "h"),
    "grid.margin": ("grid", "margin"),
    "field.kind": ("drift", "kind"),
    "field.profile": ("drift", "profile"),
    "field.radius": ("drift", "radius"),
    "field.direction": ("drift", "direction"),
    "field.stencil": ("drift", "stencil"),
    "field.table": ("drift", "table"),
    "sweep.A": ("amplitudes",),
    "tol.eigen": ("tolerances", "eigen"),
    "tol.svd": ("tolerances", "svd"),
    "tol.identity": ("tolerances", "identity"),
    "tol.quadrature": ("tolerances", "quadrature"),
    "tol.max_iter": ("tolerances", "max_iter"),
    "tol.decay": ("tolerances", "decay"),
    "tol.eigen_decay": ("tolerances", "eigen_decay"),
    "tol.symbol": ("tolerances", "symbol"),
    "mc.n_paths": ("monte_carlo", "n_paths"),
    "mc.dt": ("monte_carlo", "dt"),
    "mc.t_max": ("monte_carlo", "t_max"),
    "mc.start": ("monte_carlo", "start"),
    "mc.batch_size": ("monte_carlo", "batch_size"),
    "mc.min_alive": ("monte_carlo", "min_alive"),
    "mc.scheme": ("monte_carlo", "scheme"),
    "series.t": ("series", "t"),
    "series.nodes": ("series", "nodes"),
    "series.fft_size": ("series", "fft_size"),
    "series.terms": ("series", "terms"),
    "seed": ("seed",),
    "out.dir": ("out_dir",),
}

LIST_KEYS = frozenset(
    {"domain.center", "domain.half_widths", "field.direction", "sweep.A"}
)

_FIELD_KINDS = ("none",) + tuple(kind.value for kind in FieldKind)


def _choice(value: Any, choices: Tuple[str, ...]) -> str:
    """Normalizes `value` and checks it against `choices`."""
    value = str(value).strip().lower()
    if value not in choices:
        raise ValueError(f"must be one of {', '.join(choices)}; got {value!r}")
    return value


class DomainSettings(BaseModel):
    """The domain D."""

    kind: str = Field(
        default=DomainKind.DISK.value,
        description="One of `disk`, `annulus` or `smoothed-rect`.",
    )
    center: Tuple[float, float] = Field(default=(0.0, 0.0))
    radius: float = Field(default=1.0, description="Outer radius of disks and annuli.")
    inner_radius: float = Field(default=0.5, description="Inner radius of annuli.")
    half_widths: Tuple[float, float] = Field(
        default=(1.0, 0.6), description="Half-widths of a smoothed rectangle."
    )
    corner_radius: float = Field(
        default=0.2, description="Corner radius of a smoothed rectangle."
    )

    @validator("kind", pre=True)
    def _validate_kind(cls, value):
        """Accepts the kind names case-insensitively."""
        return _choice(value, tuple(kind.value for kind in DomainKind))

    @validator("radius")
    def _validate_radius(cls, value):
        """Radii must be positive."""
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @validator("inner_radius")
    def _validate_inner_radius(cls, value, values):
        """The inner radius of an annulus lies below the outer one."""
        if values.get("kind") == DomainKind.ANNULUS.value and not (
            0 < value < values.get("radius", math.inf)
        ):
            raise ValueError("must lie in (0, domain.radius)")
        return value

    @validator("corner_radius")
    def _validate_corner_radius(cls, value, values):
        """Rounded corners must fit inside the rectangle."""
        widths = values.get("half_widths", (math.inf, math.inf))
        if values.get("kind") == DomainKind.SMOOTHED_RECT.value and not (
            0 <= value <= min(widths)
        ):
            raise ValueError("must lie in [0, min(domain.half_widths)]")
        return value

    def build(self) -> Domain:
        """The configured `Domain`."""
        kind = DomainKind(self.kind)
        if kind is DomainKind.DISK:
            return Domain.disk(self.radius, center=self.center)
        if kind is DomainKind.ANNULUS:
            return Domain.annulus(self.inner_radius, self.radius, center=self.center)
        return Domain.smoothed_rect(
            self.half_widths, self.corner_radius, center=self.center
        )


class GridSettings(BaseModel):
    """Lattice spacing and the margin of the bounding box around the domain."""

    h: float = Field(default=0.05, description="Lattice spacing.")
    margin: Optional[float] = Field(
        default=None,
        description="Width of the exterior band; defaults to the builder's choice.",
    )

    @validator("h")
    def _validate_h(cls, value):
        """The lattice spacing must be positive and finite."""
        if not (math.isfinite(value) and value > 0):
            raise ValueError("must be positive")
        return value

    @validator("margin")
    def _validate_margin(cls, value, values):
        """The exterior band must hold at least two lattice layers."""
        if value is not None and "h" in values and value < 2 * values["h"]:
            raise ValueError("must be at least 2h")
        return value


class DriftSettings(BaseModel):
    """The divergence-free drift b."""

    kind: str = Field(
        default=FieldKind.ROTATIONAL.value,
        description=(
            "One of `none`, `rotational`, `stream`, `constant`, "
            "`custom-stream-table` or `compressible`."
        ),
    )
    profile: str = Field(
        default="compact",
        description="Angular speed of rotational fields: `compact` or `rigid`.",
    )
    radius: float = Field(
        default=0.8, description="Support radius of the compact profile."
    )
    direction: Tuple[float, float] = Field(
        default=(1.0, 0.0), description="Direction of a constant field."
    )
    stencil: str = Field(default=Stencil.AUTO.value)
    table: Optional[Path] = Field(
        default=None, description="CSV stream table with header `x1,x2,psi`."
    )

    @validator("kind", pre=True)
    def _validate_kind(cls, value):
        """Accepts the kind names case-insensitively."""
        return _choice(value, _FIELD_KINDS)

    @validator("profile", pre=True)
    def _validate_profile(cls, value):
        """Accepts `compact` or `rigid`."""
        return _choice(value, ("compact", "rigid"))

    @validator("stencil", pre=True)
    def _validate_stencil(cls, value):
        """Accepts the stencil names case-insensitively."""
        return _choice(value, tuple(s.value for s in Stencil))

    @validator("radius")
    def _validate_radius(cls, value):
        """Radii must be positive."""
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @validator("table", always=True)
    def _validate_table(cls, value, values):
        """A custom stream table needs a file."""
        if value is None and values.get("kind") == FieldKind.STREAM_TABLE.value:
            raise ValueError("required for custom-stream-table fields")
        return value

    def build(self, domain: Domain, grid: Grid) -> Optional[VectorField]:
        """
        The configured field, or None when `kind` is `none`.

        Stream fields use ψ = (R²/8)(1 - |x - c|²/R²)⁴, whose curl is the
        compact rotational field about the domain center.
        """
        if self.kind == "none":
            return None
        kind = FieldKind(self.kind)
        center = np.asarray(domain.center, dtype=float)
        if kind is FieldKind.ROTATIONAL:
            if self.profile == "rigid":
                return rotational_field(center)
            return rotational_field(center, profile=compact_profile(self.radius))
        if kind is FieldKind.CONSTANT:
            return constant_field(self.direction)
        if kind is FieldKind.COMPRESSIBLE:
            return compressible_field()
        if kind is FieldKind.STREAM_TABLE:
            return load_stream_table(self.table, grid)
        radius = self.radius

        def psi(points):
            """Stream function whose curl is the compact rotation."""
            s = np.sum((points - center) ** 2, axis=-1)
            return radius**2 / 8.0 * np.clip(1.0 - s / radius**2, 0.0, None) ** 4

        return stream_field(psi, grid)


class ToleranceSettings(BaseModel):
    """Solver and check tolerances."""

    eigen: float = Field(default=1e-9, description="Inverse iteration tolerance.")
    svd: float = Field(
        default=1e-8, description="Relative singular value cutoff of the kernel of B."
    )
    identity: float = Field(
        default=1e-10, description="Threshold of the structural matrix identities."
    )
    quadrature: float = Field(
        default=0.05, description="Relative refinement tolerance of the series."
    )
    max_iter: int = Field(default=500, description="Inverse iteration limit.")
    decay: float = Field(
        default=0.1,
        description="Allowed distance of the exit time decay slope from α/2.",
    )
    eigen_decay: float = Field(
        default=0.2,
        description=(
            "Allowed distance of the φ₀ decay slope from α/2. The fitted slope "
            "of φ₀ carries the interior curvature of the eigenfunction and sits "
            "about 0.1 to 0.16 above α/2 at h = 0.05."
        ),
    )
    symbol: float = Field(
        default=0.05, description="Allowed relative error of the discrete symbol."
    )

    @validator(
        "eigen", "svd", "identity", "quadrature", "decay", "eigen_decay", "symbol"
    )
    def _validate_positive(cls, value):
        """Tolerances must be positive and finite."""
        if not (math.isfinite(value) and value > 0):
            raise ValueError("must be positive")
        return value

    @validator("svd")
    def _validate_svd(cls, value):
        """The singular value cutoff is relative, so it must stay below 1."""
        if value >= 1:
            raise ValueError("must be below 1")
        return value

    @validator("max_iter")
    def _validate_max_iter(cls, value):
        """At least one iteration is needed."""
        if value <= 0:
            raise ValueError("must be positive")
        return value


class MonteCarloSettings(BaseModel):
    """Survival simulation settings."""

    n_paths: int = Field(default=20_000, description="Number of simulated paths.")
    dt: float = Field(default=1e-3, description="Time step.")
    t_max: float = Field(default=2.5, description="Simulation horizon.")
    start: str = Field(
        default=StartDistribution.UNIFORM.value,
        description="`uniform` over the domain or `fixed` at the domain center.",
    )
    batch_size: int = Field(default=10_000)
    min_alive: int = Field(
        default=200, description="Survivors needed for a time to enter the fit."
    )
    scheme: str = Field(
        default=DriftScheme.EULER.value,
        description="Drift integrator, `euler` or `rk4`.",
    )

    @validator("n_paths", "batch_size", "min_alive")
    def _validate_count(cls, value):
        """Path counts must be positive."""
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @validator("dt")
    def _validate_dt(cls, value):
        """The time step must be positive and finite."""
        if not (math.isfinite(value) and value > 0):
            raise ValueError("must be positive")
        return value

    @validator("start", pre=True)
    def _validate_start(cls, value):
        """Accepts `uniform` or `fixed`."""
        return _choice(value, tuple(s.value for s in StartDistribution))

    @validator("scheme", pre=True)
    def _validate_scheme(cls, value):
        """Accepts `euler` or `rk4`."""
        return _choice(value, tuple(s.value for s in DriftScheme))

    @validator("t_max")
    def _validate_horizon(cls, value, values):
        """The horizon must cover more than one step."""
        if "dt" in values and not value > values["dt"]:
            raise ValueError("must exceed mc.dt")
        return value


class SeriesSettings(BaseModel):
    """Perturbation series settings."""

    t: float = Field(
        default=0.5, description="Time at which the kernel series is evaluated."
    )
    nodes: int = Field(default=64, description="Time nodes per recursion level.")
    fft_size: int = Field(default=128, description="Spectral lattice points per axis.")
    terms: int = Field(default=2, description="Highest series order evaluated.")

    @validator("t")
    def _validate_t(cls, value):
        """The series is only evaluated up to time 2."""
        if not 0 < value <= 2.0:
            raise ValueError("must lie in (0, 2]")
        return value

    @validator("terms")
    def _validate_terms(cls, value):
        """Only the implemented series orders are accepted."""
        if not 0 <= value <= MAX_TERMS:
            raise ValueError(f"must lie in [0, {MAX_TERMS}]")
        return value

    @validator("nodes")
    def _validate_nodes(cls, value):
        """Nodes are split into two halves of even size."""
        if value < 4 or value % 4:
            raise ValueError("must be a positive multiple of 4")
        return value

    @validator("fft_size")
    def _validate_fft_size(cls, value):
        """The spectral lattice needs an even size."""
        if value < 16 or value % 2:
            raise ValueError("must be an even number of at least 16")
        return value


class RunConfig(Block):
    """
    Block holding every setting of a lab run.

    Attributes:
        alpha: Stability index α of the jump process, in (1, 2).
        domain: The domain D.
        grid: Lattice settings.
        drift: The drift field b.
        amplitudes: Drift amplitudes A of the sweep, ascending.
        tolerances: Solver and check tolerances.
        monte_carlo: Survival simulation settings.
        series: Perturbation series settings.
        seed: Root seed of every random stage.
        out_dir: Directory receiving the artifacts.

    Example:
        Load a flat configuration file and build the grid:
        ```python
        from prefect_fracdrift.config import RunConfig

        config = RunConfig.from_file("disk.cfg")
        grid = config.build_grid()
        ```
    """

    _block_type_name = "Fractional Drift Run Config"

    alpha: float = Field(default=1.5, description="Stability index α in (1, 2).")
    domain: DomainSettings = Field(
        default_factory=DomainSettings,
        description="The domain the process is killed on leaving.",
        title="Domain",
    )
    grid: GridSettings = Field(
        default_factory=GridSettings,
        description="Lattice spacing and exterior margin.",
        title="Grid",
    )
    drift: DriftSettings = Field(
        default_factory=DriftSettings,
        description="The drift field and its stencil.",
        title="Drift field",
    )
    amplitudes: List[float] = Field(
        default_factory=lambda: [0.0, 10.0, 40.0, 160.0],
        description="Drift amplitudes of the sweep.",
        title="Amplitudes",
    )
    tolerances: ToleranceSettings = Field(
        default_factory=ToleranceSettings,
        description="Solver and check tolerances.",
        title="Tolerances",
    )
    monte_carlo: MonteCarloSettings = Field(
        default_factory=MonteCarloSettings,
        description="Survival simulation settings.",
        title="Monte Carlo",
    )
    series: SeriesSettings = Field(
        default_factory=SeriesSettings,
        description="Perturbation series settings.",
        title="Series",
    )
    seed: int = Field(default=0, description="Root seed of every random stage.")
    out_dir: Path = Field(
        default=Path("fracdrift-out"),
        description="Directory receiving the artifacts.",
        title="Output directory",
    )

    class Config:
        """Configuration of pydantic."""

        arbitrary_types_allowed = True

    @validator("alpha")
    def _validate_alpha(cls, value):
        """The stability index lies strictly between 1 and 2."""
        if not 1.0 < value < 2.0:
            raise ValueError("must lie in (1, 2)")
        return value

    @validator("amplitudes")
    def _validate_amplitudes(cls, value):
        """Sorts the amplitudes after checking they are finite."""
        if not value:
            raise ValueError("must not be empty")
        if not all(math.isfinite(a) for a in value):
            raise ValueError("must be finite")
        return sorted(value)

    @validator("seed")
    def _validate_seed(cls, value):
        """Seeds are non-negative."""
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    def __hash__(self):
        """Hashes the flat settings."""
        return hash(self.config_hash())

    def flat_items(self) -> Dict[str, Any]:
        """The settings keyed by flat key; unset optional keys are omitted."""
        items = {}
        for key, path in FLAT_KEYS.items():
            value: Any = self
            for attr in path:
                value = getattr(value, attr)
            if value is not None:
                items[key] = value
        return items

    def config_hash(self) -> str:
        """Stable digest of the settings, recorded in every manifest."""
        return stable_hash(
            {key: _format_flat(value) for key, value in self.flat_items().items()}
        )

    def to_flat_text(self) -> str:
        """
        Serializes the settings as `key = value` lines.

        Floats are written with 17 significant digits so that
        `RunConfig.from_flat_text(config.to_flat_text())` reproduces `config`.
        """
        lines = [
            f"{key} = {_format_flat(value)}" for key, value in self.flat_items().items()
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat_text(
        cls, text: str, overrides: Optional[Dict[str, Any]] = None
    ) -> "RunConfig":
        """
        Parses `key = value` lines; `#` starts a comment.

        Args:
            text: The configuration text.
            overrides: Values by flat key, e.g. `{"out.dir": "runs"}`, applied
                after parsing. None values are ignored.

        Returns:
            The validated configuration.

        Raises:
            ConfigError: If a line is malformed, a key is unknown or a value fails
                validation. The message names the flat key.
        """
        flat: Dict[str, Any] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"line {number}", f"expected key = value: {raw!r}")
            if key not in FLAT_KEYS:
                raise ConfigError(key, "unknown key")
            value = value.strip()
            if key in LIST_KEYS:
                flat[key] = [item.strip() for item in value.split(",") if item.strip()]
            else:
                flat[key] = value
        for key, value in (overrides or {}).items():
            if value is not None:
                flat[key] = value
        return cls.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        """
        Builds a configuration from a mapping of flat keys.

        Raises:
            ConfigError: If a key is unknown or a value fails validation.
        """
        nested: Dict[str, Any] = {}
        for key, value in flat.items():
            if key not in FLAT_KEYS:
                raise ConfigError(key, "unknown key")
            *parents, leaf = FLAT_KEYS[key]
            target = nested
            for parent in parents:
                target = target.setdefault(parent, {})
            target[leaf] = value
        try:
            return cls(**nested)
        except ValidationError as exc:
            error = exc.errors()[0]
            raise ConfigError(_flat_key(error["loc"]), error["msg"]) from exc

    @classmethod
    def from_file(
        cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None
    ) -> "RunConfig":
        """Reads a flat configuration file, see `from_flat_text`."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read configuration: {exc}") from exc
        return cls.from_flat_text(text, overrides)

    def stable_params(self) -> StableParams:
        """The stable law of the jumps."""
        return StableParams(self.alpha)

    def build_domain(self) -> Domain:
        """The configured domain."""
        return self.domain.build()

    def build_grid(self) -> Grid:
        """The lattice over the configured domain."""
        return build_grid(self.build_domain(), self.grid.h, self.grid.margin)

    def build_field(self, grid: Optional[Grid] = None) -> Optional[VectorField]:
        """The configured drift, or None for `field.kind = none`."""
        grid = grid if grid is not None else self.build_grid()
        return self.drift.build(grid.domain, grid)

    def path_config(self, **changes: Any) -> PathConfig:
        """The survival simulation settings, with the domain center as fixed start."""
        settings = dict(
            dt=self.monte_carlo.dt,
            t_max=self.monte_carlo.t_max,
            n_paths=self.monte_carlo.n_paths,
            seed=self.seed,
            start=StartDistribution(self.monte_carlo.start),
            start_point=tuple(self.domain.center),
            batch_size=self.monte_carlo.batch_size,
            min_alive=self.monte_carlo.min_alive,
            drift_scheme=DriftScheme(self.monte_carlo.scheme),
        )
        settings.update(changes)
        return PathConfig(**settings)

    def series_resolution(self) -> SeriesResolution:
        """The quadrature resolution of the series."""
        return SeriesResolution(
            nodes=self.series.nodes,
            fft_size=self.series.fft_size,
            tolerance=self.tolerances.quadrature,
        )


def _flat_key(loc: Tuple) -> str:
    """Maps a pydantic error location to the flat key it came from."""
    path = tuple(str(part) for part in loc if part != "__root__")
    for key, attrs in FLAT_KEYS.items():
        if path and attrs[: len(path)] == path[: len(attrs)]:
            return key
    return ".".join(path) or "config"


def _format_flat(value: Any) -> str:
    """Formats a value the way it is written in flat text."""
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_flat(item) for item in value)
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)
