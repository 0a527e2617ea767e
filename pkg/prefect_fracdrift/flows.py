"""
Prefect flows running the lab experiments and writing their artifacts.

Every flow takes a `RunConfig` and writes into `config.out_dir`. Each output file
gets a sibling `<name>.manifest.json` with the configuration hash, the code
version and the wall time of the stage that produced it.
"""

import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from prefect import flow, get_run_logger, task, unmapped
from prefect.utilities.annotations import quote

from prefect_fracdrift.config import RunConfig
from prefect_fracdrift.drift_fields import (
    DriftOperator,
    VectorField,
    assemble_drift,
    constant_field,
    skewness_defect,
)
from prefect_fracdrift.exceptions import NonSkewDriftError
from prefect_fracdrift.first_integrals import (
    FirstIntegralSpace,
    conditioned_bound_check,
    conditioning_identity_check,
    first_integral_space,
    invariance_check,
    min_rayleigh,
    projection_distance,
    truncation_closure,
    upper_bound_check,
)
from prefect_fracdrift.fractional_core import (
    DiffusionOperator,
    assemble_fraclap,
    symbol_accuracy,
)
from prefect_fracdrift.geometry import Grid
from prefect_fracdrift.green_spectral import (
    EigenPair,
    SweepResult,
    boundary_decay_check,
    combine,
    decay_slope,
    duality_check,
    eigen_sweep,
    exit_time_profile,
    principal_eigenpair,
    recursion_identity_residual,
    write_eigenfunction,
)
from prefect_fracdrift.kernel_series import (
    SeriesEvaluation,
    hash_series,
    kernel_sum,
    series_mass,
    write_point_values,
)
from prefect_fracdrift.mc_validator import SurvivalCurve, estimate_lambda
from prefect_fracdrift.utilities import write_csv, write_json, write_manifest

#: Point pairs at which the perturbation series is evaluated.
SERIES_POINTS: Tuple[Tuple[Tuple[float, float], Tuple[float, float]], ...] = (
    ((0.2, 0.0), (0.0, 0.3)),
    ((0.2, 0.1), (-0.1, 0.3)),
    ((0.5, 0.0), (0.0, 0.5)),
    ((-0.3, -0.2), (0.2, 0.2)),
    ((0.1, -0.4), (0.4, 0.1)),
    ((0.6, 0.2), (0.3, -0.3)),
)
#: Start point of the series mass checks.
SERIES_MASS_POINT = (0.3, 0.1)
#: Allowed deviation of the series mass from 1.
SERIES_MASS_TOLERANCE = 2e-2
#: Regularization of the conditioning checks.
CONDITIONING_EPS = 1e-3


def _amplitude_tag(amplitude: float) -> str:
    """File name tag of an amplitude, e.g. `A40`."""
    return f"A{amplitude:g}"


def _drift_or_zero(b: Optional[VectorField]) -> VectorField:
    """The configured field, with the zero field standing in for `none`."""
    return b if b is not None else constant_field((0.0, 0.0))


@task
def assemble_operator(config: RunConfig) -> Tuple[Grid, DiffusionOperator]:
    """
    Builds the grid and assembles the fractional Laplacian on it.

    Args:
        config: The run configuration.

    Returns:
        The grid and the operator.
    """
    logger = get_run_logger()
    grid = config.build_grid()
    L0 = assemble_fraclap(grid, config.stable_params())
    logger.info(
        "Assembled the fractional Laplacian on %s interior nodes (h=%s)",
        grid.n_interior,
        grid.h,
    )
    return grid, L0


@task
def build_drift(config: RunConfig, grid: Grid) -> Tuple[VectorField, DriftOperator]:
    """
    Builds the configured field and its unit-amplitude drift operator.

    `field.kind = none` yields the zero field.
    """
    b = _drift_or_zero(config.build_field(grid))
    unit = assemble_drift(grid, b, 1.0, stencil=config.drift.stencil)
    get_run_logger().info(
        "Assembled %s drift with the %s stencil", b.kind.value, unit.stencil.value
    )
    return b, unit


@task
def solve_sweep(
    config: RunConfig, L0: DiffusionOperator, b: VectorField
) -> SweepResult:
    """Principal eigenpairs for every configured amplitude."""
    logger = get_run_logger()
    sweep = eigen_sweep(
        L0,
        b,
        config.amplitudes,
        tol=config.tolerances.eigen,
        max_iter=config.tolerances.max_iter,
        stencil=config.drift.stencil,
    )
    for row in sweep.rows:
        logger.info(
            "A=%s: lambda=%.12g after %s iterations", row.A, row.lam, row.iters
        )
    return sweep


@task
def summarize_first_integrals(
    config: RunConfig,
    L0: DiffusionOperator,
    unit: DriftOperator,
    sweep: SweepResult,
) -> Dict[str, Any]:
    """
    Compares the top of the sweep with the minimum of E^α over first integrals.

    Returns:
        `k`, `e_star`, `lambda_limit_gap` = |λ(A_max) - e*|/e*, the distance of
        the minimizer to φ₀ and the largest violation of the upper bound. The
        numbers are None when the drift is not skew.
    """
    logger = get_run_logger()
    try:
        space = first_integral_space(unit, config.tolerances.svd)
    except NonSkewDriftError as exc:
        logger.warning("Skipping first integrals: %s", exc)
        return {
            "k": None,
            "e_star": None,
            "lambda_limit_gap": None,
            "skewness_defect": exc.defect,
        }
    minimizer = min_rayleigh(L0, space)
    lam_top = float(sweep.eigenvalues[-1])
    if math.isinf(minimizer.e_star):
        gap = math.inf
        distance = None
    else:
        gap = abs(lam_top - minimizer.e_star) / minimizer.e_star
        phi0 = sweep.pairs[0].phi
        distance = min(
            L0.grid.norm(minimizer.w_star - phi0),
            L0.grid.norm(minimizer.w_star + phi0),
        )
    logger.info(
        "First integrals: k=%s, e_star=%.12g, gap=%.3g", space.k, minimizer.e_star, gap
    )
    return {
        "k": space.k,
        "e_star": minimizer.e_star,
        "lambda_limit_gap": gap,
        "lambda_ratio": lam_top / float(sweep.eigenvalues[0]),
        "w_star_phi0_distance": distance,
        "upper_bound_violation": upper_bound_check(sweep, space, L0),
    }


@task
def write_sweep_artifacts(
    config: RunConfig,
    grid: Grid,
    sweep: SweepResult,
    summary: Dict[str, Any],
    started: float,
) -> Dict[str, str]:
    """Writes the sweep CSV, the summary JSON and one eigenfunction per amplitude."""
    out = Path(config.out_dir)
    config_hash = config.config_hash()
    paths = {"sweep": sweep.to_csv(out / "sweep.csv")}
    paths["summary"] = write_json(out / "first_integrals_summary.json", summary)
    for pair in sweep.pairs:
        tag = _amplitude_tag(pair.amplitude)
        paths[f"eigenfunction_{tag}"] = write_eigenfunction(
            pair, grid, out / f"eigenfunction_{tag}.csv"
        )
    for name, path in paths.items():
        write_manifest(path, config_hash, started, {"stage": f"sweep/{name}"})
    return {name: str(path) for name, path in paths.items()}


@flow
def sweep_flow(config: RunConfig) -> Dict[str, Any]:
    """
    Principal eigenvalues across the amplitude sweep and their limit.

    Args:
        config: The run configuration.

    Returns:
        The artifact paths and the first-integral summary.

    Example:
        ```python
        from prefect_fracdrift.config import RunConfig
        from prefect_fracdrift.flows import sweep_flow

        result = sweep_flow(RunConfig(amplitudes=[0, 10, 40, 160]))
        print(result["summary"]["lambda_limit_gap"])
        ```
    """
    started = time.perf_counter()
    grid, L0 = assemble_operator(config)
    b, unit = build_drift(config, quote(grid))
    sweep = solve_sweep(config, quote(L0), quote(b))
    summary = summarize_first_integrals(config, quote(L0), quote(unit), quote(sweep))
    paths = write_sweep_artifacts(config, quote(grid), quote(sweep), summary, started)
    return {"paths": paths, "summary": summary}


def _check(name: str, value: float, threshold: float, passed: bool) -> Dict[str, Any]:
    """One row of the checks report."""
    return {"name": name, "value": value, "threshold": threshold, "passed": passed}


@task
def structural_checks(
    config: RunConfig, L0: DiffusionOperator, unit: DriftOperator
) -> List[Dict[str, Any]]:
    """
    Recursion identity, transpose duality and skewness at the largest amplitude.

    Duality and skewness are measured relative to the largest matrix entry.
    """
    tol = config.tolerances.identity
    B = unit.with_amplitude(config.amplitudes[-1])
    scale = float(np.max(np.abs(L0.matrix)))
    recursion = recursion_identity_residual(L0, B, seed=config.seed)
    duality = duality_check(L0, B) / scale
    unit_scale = float(np.max(np.abs(unit.unit.data), initial=0.0)) or 1.0
    skewness = skewness_defect(unit.unit) / unit_scale
    return [
        _check("recursion_residual", recursion, tol, recursion <= tol),
        _check("duality", duality, tol, duality <= tol),
        _check("skewness", skewness, tol, skewness <= tol),
    ]


@task
def boundary_checks(config: RunConfig, L0: DiffusionOperator) -> List[Dict[str, Any]]:
    """
    Boundary decay slopes of φ₀ and of the mean exit time, against α/2.

    The exit time G_D1 is held to `tol.decay`. The φ₀ slope is held to the
    wider `tol.eigen_decay` because the fit window also sees the interior
    curvature of the eigenfunction.
    """
    target = config.alpha / 2.0
    tolerances = config.tolerances
    plain = combine(L0)
    pair = principal_eigenpair(
        plain, tol=tolerances.eigen, max_iter=tolerances.max_iter
    )
    checks = []
    for name, slope, band in (
        (
            "eigenfunction_decay_slope",
            boundary_decay_check(pair, L0.grid),
            tolerances.eigen_decay,
        ),
        (
            "exit_time_decay_slope",
            decay_slope(exit_time_profile(plain), L0.grid),
            tolerances.decay,
        ),
    ):
        checks.append(_check(name, slope, target, abs(slope - target) <= band))
    return checks


@task
def symbol_check(config: RunConfig) -> Dict[str, Any]:
    """Relative error of the discrete operator on a windowed plane wave."""
    error = symbol_accuracy(config.stable_params())
    return _check(
        "symbol_accuracy",
        error,
        config.tolerances.symbol,
        error <= config.tolerances.symbol,
    )


@flow
def checks_flow(config: RunConfig) -> Dict[str, Any]:
    """
    Runs the structural and boundary checks and writes a JSON report.

    Args:
        config: The run configuration.

    Returns:
        The report: `checks`, a list of `{name, value, threshold, passed}`, and
        `passed`, true when every check passed.
    """
    logger = get_run_logger()
    started = time.perf_counter()
    grid, L0 = assemble_operator(config)
    _, unit = build_drift(config, quote(grid))
    checks = structural_checks(config, quote(L0), quote(unit))
    checks += boundary_checks(config, quote(L0))
    checks.append(symbol_check(config))
    for check in checks:
        logger.info(
            "%s: %.6g (%s)",
            check["name"],
            check["value"],
            "pass" if check["passed"] else "FAIL",
        )
    report = {"checks": checks, "passed": all(c["passed"] for c in checks)}
    path = write_json(Path(config.out_dir) / "checks.json", report)
    write_manifest(path, config.config_hash(), started, {"stage": "checks"})
    return report


@task
def simulate_amplitude(config: RunConfig, amplitude: float) -> SurvivalCurve:
    """Estimates λ̂ at one amplitude from simulated survival."""
    logger = get_run_logger()
    domain = config.build_domain()
    b = config.build_field()
    curve = estimate_lambda(
        domain, b, amplitude, config.path_config(), config.stable_params()
    )
    logger.info(
        "A=%s: lambda_hat=%.6g +/- %.2g", amplitude, curve.lambda_hat, curve.stderr
    )
    return curve


@task
def grid_eigenvalues(config: RunConfig) -> List[float]:
    """Grid eigenvalues λ_A for comparison with the simulation."""
    grid = config.build_grid()
    L0 = assemble_fraclap(grid, config.stable_params())
    b = _drift_or_zero(config.build_field(grid))
    sweep = eigen_sweep(
        L0,
        b,
        config.amplitudes,
        tol=config.tolerances.eigen,
        max_iter=config.tolerances.max_iter,
        stencil=config.drift.stencil,
    )
    return [float(lam) for lam in sweep.eigenvalues]


@flow
def mc_flow(config: RunConfig) -> Dict[str, Any]:
    """
    Survival simulations at every amplitude, one mapped task per amplitude.

    Each summary records λ̂, its standard error, the grid eigenvalue and
    `consistent`, true when |λ̂ - λ_grid| ≤ 3·stderr.

    Args:
        config: The run configuration.

    Returns:
        The artifact paths and the summaries, in amplitude order.
    """
    started = time.perf_counter()
    futures = simulate_amplitude.map(
        config=unmapped(config), amplitude=config.amplitudes
    )
    lambdas = grid_eigenvalues(config)
    out = Path(config.out_dir)
    config_hash = config.config_hash()
    paths, summaries = {}, []
    for amplitude, future, lam_grid in zip(config.amplitudes, futures, lambdas):
        curve = future.result()
        tag = _amplitude_tag(amplitude)
        summary = {
            **curve.summary(),
            "A": amplitude,
            "lambda_grid": lam_grid,
            "consistent": abs(curve.lambda_hat - lam_grid) <= 3.0 * curve.stderr,
        }
        paths[f"survival_{tag}"] = curve.to_csv(out / f"survival_{tag}.csv")
        paths[f"summary_{tag}"] = write_json(out / f"mc_summary_{tag}.json", summary)
        summaries.append(summary)
    for name, path in paths.items():
        write_manifest(path, config_hash, started, {"stage": f"mc/{name}"})
    return {"paths": {k: str(v) for k, v in paths.items()}, "summaries": summaries}


def _antisymmetry_defect(
    forward: SeriesEvaluation, backward: SeriesEvaluation
) -> List[float]:
    """Relative defect of p_n(x, y) = (-1)^n p_n(y, x), per term."""
    floor = 1e-3 * forward.terms[0]
    defects = []
    for n, (a, b) in enumerate(zip(forward.terms, backward.terms)):
        scale = max(abs(a), abs(b)) + floor
        defects.append(abs(a - (-1) ** n * b) / scale)
    return defects


@task
def evaluate_points(
    config: RunConfig, b: VectorField
) -> Tuple[List[SeriesEvaluation], List[Dict[str, Any]]]:
    """
    Series terms at each point pair in both directions, with the hash series.

    Returns:
        The evaluations and, per point pair, the largest antisymmetry defect of
        p_n(t, x, y) against (-1)^n p_n(t, y, x) and of the hash series against
        the series at swapped points.
    """
    logger = get_run_logger()
    p = config.stable_params()
    resolution = config.series_resolution()
    t, N = config.series.t, config.series.terms
    evaluations, rows = [], []
    for x, y in SERIES_POINTS:
        forward = kernel_sum(t, x, y, b, N, p, resolution)
        backward = kernel_sum(t, y, x, b, N, p, resolution)
        dual = hash_series(t, x, y, b, N, p, resolution)
        antisymmetry = max(_antisymmetry_defect(forward, backward)[1:], default=0.0)
        floor = 1e-3 * forward.terms[0]
        duality = max(
            abs(d - s) / (max(abs(d), abs(s)) + floor)
            for d, s in zip(dual.terms, backward.terms)
        )
        evaluations.extend([forward, backward])
        rows.append(
            {
                "x": list(x),
                "y": list(y),
                "antisymmetry": antisymmetry,
                "hash_duality": duality,
                "ratio": forward.ratio,
            }
        )
        logger.info(
            "Pair %s -> %s: antisymmetry %.3g, ratio %.6g",
            x,
            y,
            antisymmetry,
            forward.ratio,
        )
    return evaluations, rows


@flow
def kernel_series_flow(config: RunConfig) -> Dict[str, Any]:
    """
    Evaluates the perturbation series at the point pairs and checks its structure.

    The summary holds per-pair antisymmetry defects, the partial-sum mass and
    its dual, each compared with its tolerance.

    Args:
        config: The run configuration.

    Returns:
        The artifact paths and the summary.
    """
    started = time.perf_counter()
    grid = config.build_grid()
    b = _drift_or_zero(config.build_field(grid))
    evaluations, pairs = evaluate_points(config, quote(b))
    p = config.stable_params()
    resolution = config.series_resolution()
    t, N = config.series.t, config.series.terms
    mass = series_mass(t, SERIES_MASS_POINT, b, N, p, resolution)
    dual_mass = series_mass(t, SERIES_MASS_POINT, b, N, p, resolution, dual=True)
    tolerance = config.tolerances.quadrature
    summary = {
        "t": t,
        "terms": N,
        "pairs": pairs,
        "mass": mass,
        "dual_mass": dual_mass,
        "antisymmetry_passed": all(row["antisymmetry"] <= tolerance for row in pairs),
        "mass_passed": all(
            abs(m - 1.0) <= SERIES_MASS_TOLERANCE for m in (mass, dual_mass)
        ),
        "resolution": evaluations[0].resolution if evaluations else {},
    }
    out = Path(config.out_dir)
    paths = {
        "series": write_point_values(evaluations, out / "kernel_series.csv"),
        "summary": write_json(out / "kernel_series_summary.json", summary),
    }
    for name, path in paths.items():
        write_manifest(path, config.config_hash(), started, {"stage": f"series/{name}"})
    return {"paths": {k: str(v) for k, v in paths.items()}, "summary": summary}


@task
def first_integral_report(
    config: RunConfig,
    grid: Grid,
    L0: DiffusionOperator,
    b: VectorField,
    unit: DriftOperator,
) -> Tuple[Dict[str, Any], FirstIntegralSpace, Optional[np.ndarray]]:
    """
    Measures the first-integral space and the conditioning argument on it.

    Returns:
        The report, the space and the minimizer w*, which is None when the
        space is trivial.

    Raises:
        NonSkewDriftError: If the configured field is compressible.
    """
    logger = get_run_logger()
    space = first_integral_space(unit, config.tolerances.svd)
    minimizer = min_rayleigh(L0, space)
    pair: EigenPair = principal_eigenpair(
        combine(L0), tol=config.tolerances.eigen, max_iter=config.tolerances.max_iter
    )
    report: Dict[str, Any] = {
        "k": space.k,
        "e_star": minimizer.e_star,
        "lambda_0": pair.lam,
        "phi0_projection_distance": projection_distance(pair.phi, space),
    }
    w = minimizer.w_star
    if w is not None:
        level = 0.5 * float(np.max(np.abs(w)))
        conditioning = conditioning_identity_check(
            w, pair, L0, CONDITIONING_EPS, seed=config.seed
        )
        bound = conditioned_bound_check(w, pair, L0, level, CONDITIONING_EPS)
        report.update(
            invariance=invariance_check(w, grid, b, seed=config.seed),
            truncation_closure=truncation_closure(w, level, space),
            conditioning_lhs=conditioning.lhs,
            conditioning_rhs=conditioning.rhs,
            identity_defect=conditioning.identity_defect,
            conditioned_energy=bound.energy,
            conditioned_bound=bound.bound,
            conditioned_bound_holds=bound.holds,
        )
    logger.info("First-integral space of dimension %s", space.k)
    return report, space, w


@flow
def first_integrals_flow(config: RunConfig) -> Dict[str, Any]:
    """
    Computes the discrete first integrals and the minimizer of E^α over them.

    Writes the report, the singular spectrum of B (`singular_values.csv`, one
    `sigma` column), the kernel basis (`first_integral_basis.csv`) and w*.

    Args:
        config: The run configuration.

    Returns:
        The artifact paths and the report.
    """
    started = time.perf_counter()
    grid, L0 = assemble_operator(config)
    b, unit = build_drift(config, quote(grid))
    report, space, w = first_integral_report(
        config, quote(grid), quote(L0), quote(b), quote(unit)
    )
    out = Path(config.out_dir)
    paths = {
        "report": write_json(out / "first_integrals.json", report),
        "singular_values": space.singular_values_to_csv(out / "singular_values.csv"),
        "basis": space.basis_to_csv(out / "first_integral_basis.csv"),
    }
    if w is not None:
        rows = (
            (float(x[0]), float(x[1]), float(value))
            for x, value in zip(grid.interior_points, w)
        )
        paths["w_star"] = write_csv(out / "w_star.csv", ("x1", "x2", "w"), rows)
    for name, path in paths.items():
        write_manifest(
            path, config.config_hash(), started, {"stage": f"first_integrals/{name}"}
        )
    return {"paths": {k: str(v) for k, v in paths.items()}, "report": report}
