"""
Monte Carlo estimates of the decay rate λ_A from the survival of the
drift-perturbed isotropic α-stable process killed on leaving the domain.

Increments are drawn by subordination: a positive (α/2)-stable time change of a
Brownian motion run at speed 2 has characteristic function e^(-dt|ξ|^α).
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from prefect.logging import get_logger

from prefect_fracdrift.drift_fields import VectorField
from prefect_fracdrift.exceptions import DomainError, EstimatorError
from prefect_fracdrift.fractional_core import StableParams
from prefect_fracdrift.geometry import Domain
from prefect_fracdrift.utilities import write_csv, write_json

logger = get_logger("prefect_fracdrift.mc_validator")

#: Fraction of the horizon excluded from the fit as the initial transient.
TRANSIENT_FRACTION = 0.2
#: Largest drift displacement per step, relative to the domain half-extent.
DRIFT_STEP_LIMIT = 0.02


class StartDistribution(Enum):
    """Where paths start."""

    FIXED = "fixed"
    UNIFORM = "uniform"


class DriftScheme(Enum):
    """Integrator for the drift substep."""

    RK4 = "rk4"
    EULER = "euler"


@dataclass(frozen=True)
class PathConfig:
    """
    Settings of a survival simulation.

    Attributes:
        dt: Time step.
        t_max: Horizon.
        n_paths: Number of paths.
        seed: Root seed; each batch draws from its own Philox stream.
        start: Start distribution.
        start_point: Start point for `FIXED` starts.
        batch_size: Paths simulated together.
        min_alive: Paths that must remain for a time to count in the fit.
        drift_scheme: Integrator for the drift substep.
    """

    dt: float = 1e-3
    t_max: float = 2.5
    n_paths: int = 20_000
    seed: int = 0
    start: StartDistribution = StartDistribution.UNIFORM
    start_point: Tuple[float, float] = (0.0, 0.0)
    batch_size: int = 10_000
    min_alive: int = 200
    drift_scheme: DriftScheme = DriftScheme.EULER

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}.")
        if not self.t_max > self.dt:
            raise DomainError(f"t_max must exceed dt, got {self.t_max}.")
        if self.n_paths <= 0:
            raise DomainError(f"n_paths must be positive, got {self.n_paths}.")
        if self.batch_size <= 0:
            raise DomainError(f"batch_size must be positive, got {self.batch_size}.")
        object.__setattr__(self, "start", StartDistribution(self.start))
        object.__setattr__(self, "drift_scheme", DriftScheme(self.drift_scheme))

    @property
    def n_steps(self) -> int:
        """Number of time steps up to the horizon."""
        return int(round(self.t_max / self.dt))


@dataclass
class SurvivalCurve:
    """
    Survival counts and the fitted decay rate.

    Attributes:
        times: Time grid, starting at 0.
        alive: Surviving paths at each time.
        n_paths: Paths simulated.
        lambda_hat: Fitted decay rate.
        stderr: Standard error of `lambda_hat`.
        window: Fit window `(start, end)`.
        deaths: Deaths inside the window.
        fit_residual: RMS residual of a straight-line fit of log-survival.
        dt: Time step.
        seed: Root seed.
    """

    times: np.ndarray = field(repr=False)
    alive: np.ndarray = field(repr=False)
    n_paths: int
    lambda_hat: float
    stderr: float
    window: Tuple[float, float]
    deaths: int
    fit_residual: float
    dt: float
    seed: int

    @property
    def survival(self) -> np.ndarray:
        """Fraction of paths alive at each time."""
        return self.alive / self.n_paths

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Writes `t,alive_fraction` rows."""
        return write_csv(
            path, ("t", "alive_fraction"), zip(self.times, self.survival)
        )

    def summary(self) -> dict:
        """The JSON summary of the fit."""
        return {
            "lambda_hat": self.lambda_hat,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "dt": self.dt,
            "seed": self.seed,
            "window": list(self.window),
            "deaths": self.deaths,
            "fit_residual": self.fit_residual,
        }

    def write_summary(self, path: Union[str, Path], **extra) -> Path:
        """Writes the summary as JSON."""
        return write_json(path, {**self.summary(), **extra})


def positive_stable(
    beta: float, rng: np.random.Generator, size=None
) -> np.ndarray:
    """
    Positive β-stable variables with E e^(-uS) = e^(-u^β), by Kanter's representation.

    Args:
        beta: Index in (0, 1).
        rng: Random generator.
        size: Output shape.

    Returns:
        Samples of S.
    """
    theta = rng.uniform(0.0, math.pi, size)
    w = rng.standard_exponential(size)
    a = (
        np.sin((1.0 - beta) * theta)
        * np.sin(beta * theta) ** (beta / (1.0 - beta))
        / np.sin(theta) ** (1.0 / (1.0 - beta))
    )
    return (a / w) ** ((1.0 - beta) / beta)


def sample_stable_increment(
    dt: float, alpha: float, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """
    Increments of the isotropic α-stable process over a step dt.

    Args:
        dt: Step, positive.
        alpha: Stability index.
        rng: Random generator.
        size: Number of increments; a single vector when omitted.

    Returns:
        √(2S)·Z with S = dt^(2/α) S₁, S₁ positive (α/2)-stable and Z standard
        Gaussian in the plane; shape `(2,)` or `(size, 2)`.

    Raises:
        DomainError: If `dt <= 0`.

    Example:
        ```python
        import numpy as np
        from prefect_fracdrift.mc_validator import sample_stable_increment

        rng = np.random.default_rng(7)
        jumps = sample_stable_increment(0.01, 1.5, rng, size=1000)
        ```
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}.")
    beta = alpha / 2.0
    count = 1 if size is None else size
    subordinator = dt ** (1.0 / beta) * positive_stable(beta, rng, count)
    increments = np.sqrt(2.0 * subordinator)[:, None] * rng.standard_normal((count, 2))
    return increments[0] if size is None else increments


class LaplaceCheck(NamedTuple):
    """Empirical against exact Laplace transform of the subordinator."""

    u: float
    empirical: float
    exact: float
    stderr: float


def laplace_transform_check(
    alpha: float, us: Sequence[float], n: int, rng: np.random.Generator
) -> List[LaplaceCheck]:
    """Compares the mean of e^(-uS₁) over `n` samples with e^(-u^(α/2))."""
    beta = alpha / 2.0
    samples = positive_stable(beta, rng, n)
    checks = []
    for u in us:
        values = np.exp(-u * samples)
        checks.append(
            LaplaceCheck(
                u=float(u),
                empirical=float(values.mean()),
                exact=math.exp(-(u**beta)),
                stderr=float(values.std(ddof=1) / math.sqrt(n)),
            )
        )
    return checks


def _drift_step(x: np.ndarray, velocity, dt: float, scheme: DriftScheme) -> np.ndarray:
    """One substep of dX/dt = v(X) with the chosen integrator."""
    k1 = velocity(x)
    if scheme is DriftScheme.EULER:
        return x + dt * k1
    k2 = velocity(x + 0.5 * dt * k1)
    k3 = velocity(x + 0.5 * dt * k2)
    k4 = velocity(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _start_points(
    domain: Domain, cfg: PathConfig, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Start points of a batch, by rejection sampling for uniform starts."""
    if cfg.start is StartDistribution.FIXED:
        point = np.asarray(cfg.start_point, dtype=float)
        if not domain.contains(point):
            raise DomainError(f"Start point {cfg.start_point} is outside the domain.")
        return np.tile(point, (count, 1))
    center = np.asarray(domain.center)
    extent = np.asarray(domain.half_extent)
    chosen = []
    while sum(len(c) for c in chosen) < count:
        candidates = rng.uniform(center - extent, center + extent, size=(2 * count, 2))
        chosen.append(candidates[domain.contains(candidates)])
    return np.concatenate(chosen)[:count]


def simulate_survival(
    domain: Domain,
    b: Optional[VectorField],
    A: float,
    cfg: PathConfig,
    p: StableParams,
) -> np.ndarray:
    """
    Surviving path counts at each step of the time grid.

    Paths take a drift substep, then a stable jump, and are killed when the
    post-jump position lies outside the domain.

    Returns:
        Integer counts of shape `(n_steps + 1,)`, starting at `n_paths`.
    """
    if b is not None and A != 0:
        sample = _start_points(domain, cfg, 2048, np.random.default_rng(0))
        speed = abs(A) * float(np.max(np.abs(b(sample))))
        if speed * cfg.dt > DRIFT_STEP_LIMIT * max(domain.half_extent):
            logger.warning(
                "Drift moves %.3g per step, above %.3g; reduce dt.",
                speed * cfg.dt,
                DRIFT_STEP_LIMIT * max(domain.half_extent),
            )

        def velocity(x):
            return A * b(x)

    else:
        velocity = None

    n_batches = int(math.ceil(cfg.n_paths / cfg.batch_size))
    streams = np.random.SeedSequence(cfg.seed).spawn(n_batches)
    alive = np.zeros(cfg.n_steps + 1, dtype=np.int64)
    for batch, stream in enumerate(streams):
        rng = np.random.Generator(np.random.Philox(stream))
        count = min(cfg.batch_size, cfg.n_paths - batch * cfg.batch_size)
        x = _start_points(domain, cfg, count, rng)
        alive[0] += count
        for step in range(1, cfg.n_steps + 1):
            if velocity is not None:
                x = _drift_step(x, velocity, cfg.dt, cfg.drift_scheme)
            x = x + sample_stable_increment(cfg.dt, p.alpha, rng, len(x))
            x = x[domain.contains(x)]
            alive[step] += len(x)
            if not len(x):
                break
    return alive


def fit_survival(alive: np.ndarray, cfg: PathConfig) -> SurvivalCurve:
    """
    Fits the decay rate to survival counts.

    The horizon is the last time with at least `min_alive` survivors, capped at
    `t_max`; the window drops its first 20%. The rate is deaths per unit of
    exposure in the window, with standard error λ̂/√deaths.

    Raises:
        EstimatorError: If no paths die inside the window.
    """
    times = cfg.dt * np.arange(len(alive))
    enough = np.flatnonzero(alive >= cfg.min_alive)
    if len(enough) < 2:
        raise EstimatorError(
            "Every path died before the fit window; horizon too long or domain "
            "too small."
        )
    last = int(enough[-1])
    first = int(math.floor(TRANSIENT_FRACTION * last))
    deaths = int(alive[first] - alive[last])
    exposure = cfg.dt * float(np.sum(alive[first:last]))
    if deaths <= 0 or exposure <= 0:
        raise EstimatorError(
            "No deaths inside the fit window; horizon too short for the decay."
        )
    lambda_hat = deaths / exposure
    window = slice(first, last + 1)
    log_survival = np.log(alive[window] / alive[0])
    slope, intercept = np.polyfit(times[window], log_survival, 1)
    residual = log_survival - (slope * times[window] + intercept)
    return SurvivalCurve(
        times=times,
        alive=alive,
        n_paths=int(alive[0]),
        lambda_hat=float(lambda_hat),
        stderr=float(lambda_hat / math.sqrt(deaths)),
        window=(float(times[first]), float(times[last])),
        deaths=deaths,
        fit_residual=float(np.sqrt(np.mean(residual**2))),
        dt=cfg.dt,
        seed=cfg.seed,
    )


def estimate_lambda(
    domain: Domain,
    b: Optional[VectorField],
    A: float,
    cfg: PathConfig,
    p: StableParams,
) -> SurvivalCurve:
    """
    Estimates λ_A from the survival of the killed process.

    Args:
        domain: The domain.
        b: The drift field, or None.
        A: Drift amplitude.
        cfg: Simulation settings.
        p: Stable parameters.

    Returns:
        The survival curve with λ̂ and its standard error.

    Raises:
        EstimatorError: If the fit window holds no data.

    Example:
        ```python
        from prefect_fracdrift.fractional_core import StableParams
        from prefect_fracdrift.geometry import Domain
        from prefect_fracdrift.mc_validator import PathConfig, estimate_lambda

        curve = estimate_lambda(
            Domain.disk(1.0), None, 0.0, PathConfig(n_paths=2000), StableParams(1.5)
        )
        print(curve.lambda_hat, curve.stderr)
        ```
    """
    curve = fit_survival(simulate_survival(domain, b, A, cfg, p), cfg)
    logger.debug(
        "A=%s: lambda_hat=%.6g +/- %.2g over %s",
        A,
        curve.lambda_hat,
        curve.stderr,
        curve.window,
    )
    return curve


class ExitProfile(NamedTuple):
    """Mean exit times from starts on a radial ray."""

    slope: float
    deltas: List[float]
    mean_times: List[float]
    stderrs: List[float]


def exit_profile(
    domain: Domain,
    cfg: PathConfig,
    p: StableParams,
    deltas: Sequence[float] = (0.02, 0.04, 0.08, 0.16),
) -> ExitProfile:
    """
    Log-log slope of the mean exit time against δ_D along a radial ray.

    Starts sit at `center + (R - δ, 0)`; paths alive at `t_max` are counted with
    exit time `t_max`. The process is drift-free.

    Args:
        domain: A disk or annulus.
        cfg: Simulation settings; `start` is overridden per start point.
        p: Stable parameters.
        deltas: Distances to the boundary of the start points.

    Returns:
        The regression slope, with per-start mean exit times and standard errors.
    """
    center = np.asarray(domain.center)
    means, errors = [], []
    for k, delta in enumerate(deltas):
        point = tuple(center + np.array([domain.half_extent[0] - delta, 0.0]))
        run = PathConfig(
            dt=cfg.dt,
            t_max=cfg.t_max,
            n_paths=cfg.n_paths,
            seed=cfg.seed + k,
            start=StartDistribution.FIXED,
            start_point=point,
            batch_size=cfg.batch_size,
        )
        alive = simulate_survival(domain, None, 0.0, run, p)
        deaths = -np.diff(alive)
        exit_times = run.dt * np.arange(1, len(alive))
        censored = alive[-1]
        total = float(np.sum(deaths * exit_times) + censored * run.t_max)
        mean = total / run.n_paths
        second = float(np.sum(deaths * exit_times**2) + censored * run.t_max**2)
        variance = max(second / run.n_paths - mean**2, 0.0)
        means.append(mean)
        errors.append(math.sqrt(variance / run.n_paths))
    slope, _ = np.polyfit(np.log(deltas), np.log(means), 1)
    return ExitProfile(
        slope=float(slope),
        deltas=[float(d) for d in deltas],
        mean_times=means,
        stderrs=errors,
    )
