import json
import math
from pathlib import Path

import pytest

from prefect_fracdrift.config import RunConfig
from prefect_fracdrift.flows import (
    SERIES_POINTS,
    checks_flow,
    first_integrals_flow,
    kernel_series_flow,
    mc_flow,
    sweep_flow,
)

CHECK_NAMES = [
    "recursion_residual",
    "duality",
    "skewness",
    "eigenfunction_decay_slope",
    "exit_time_decay_slope",
    "symbol_accuracy",
]


def with_changes(config: RunConfig, **flat) -> RunConfig:
    items = config.flat_items()
    items.update(flat)
    return RunConfig.from_flat(items)


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


class TestSweepFlow:
    def test_rotation_reaches_its_limit(self, run_config):
        result = sweep_flow(run_config)
        summary = result["summary"]
        assert summary["k"] > 0
        assert summary["lambda_limit_gap"] < 1e-6
        assert summary["lambda_ratio"] == pytest.approx(1.0, abs=1e-6)
        assert summary["w_star_phi0_distance"] < 1e-4
        assert summary["upper_bound_violation"] <= 0.0

    def test_artifacts(self, run_config):
        paths = sweep_flow(run_config)["paths"]
        out = Path(run_config.out_dir)
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "A,lambda,iters,residual,seconds"
        assert len(lines) == 1 + len(run_config.amplitudes)
        for tag in ("A0", "A5", "A20"):
            assert (out / f"eigenfunction_{tag}.csv").exists()
        for path in paths.values():
            manifest = read_json(str(path) + ".manifest.json")
            assert manifest["artifact"] == Path(path).name
            assert manifest["config_hash"] == run_config.config_hash()

    def test_constant_field_has_no_first_integrals(self, run_config):
        config = with_changes(
            run_config, **{"field.kind": "constant", "sweep.A": [0, 2, 4]}
        )
        summary = sweep_flow(config)["summary"]
        assert summary["k"] == 0
        assert math.isinf(summary["lambda_limit_gap"])
        assert summary["lambda_ratio"] > 1.0
        written = read_json(Path(config.out_dir) / "first_integrals_summary.json")
        assert written["e_star"] == "inf"

    def test_compressible_field_is_reported(self, run_config):
        config = with_changes(
            run_config, **{"field.kind": "compressible", "sweep.A": [0, 1]}
        )
        summary = sweep_flow(config)["summary"]
        assert summary["k"] is None
        assert summary["skewness_defect"] > 0.0

    def test_no_field(self, run_config):
        config = with_changes(run_config, **{"field.kind": "none"})
        summary = sweep_flow(config)["summary"]
        assert summary["lambda_ratio"] == pytest.approx(1.0)


@pytest.mark.slow
class TestChecksFlow:
    def test_rotational_structure(self, run_config):
        report = checks_flow(run_config)
        checks = {check["name"]: check for check in report["checks"]}
        assert list(checks) == CHECK_NAMES
        assert checks["skewness"]["passed"]
        assert checks["duality"]["passed"]
        assert checks["recursion_residual"]["value"] < 1e-8
        assert checks["eigenfunction_decay_slope"]["threshold"] == pytest.approx(0.75)
        written = read_json(Path(run_config.out_dir) / "checks.json")
        assert written["passed"] == report["passed"]

    def test_compressible_field_fails_skewness(self, run_config):
        config = with_changes(
            run_config, **{"field.kind": "compressible", "sweep.A": [0, 1]}
        )
        report = checks_flow(config)
        checks = {check["name"]: check for check in report["checks"]}
        assert not checks["skewness"]["passed"]
        assert not report["passed"]

    @pytest.mark.parametrize("alpha", [1.5, 1.2])
    def test_boundary_slopes_pass_on_fine_grid(self, run_config, alpha):
        config = with_changes(run_config, **{"alpha": alpha, "grid.h": 0.05})
        report = checks_flow(config)
        failed = [check["name"] for check in report["checks"] if not check["passed"]]
        assert failed == []
        assert report["passed"]


class TestKernelSeriesFlow:
    def test_summary(self, run_config):
        config = with_changes(run_config, **{"series.terms": 1, "tol.quadrature": 0.5})
        result = kernel_series_flow(config)
        summary = result["summary"]
        assert summary["terms"] == 1
        assert len(summary["pairs"]) == len(SERIES_POINTS)
        assert summary["antisymmetry_passed"]
        assert math.isfinite(summary["mass"])
        assert math.isfinite(summary["dual_mass"])
        lines = Path(result["paths"]["series"]).read_text().splitlines()
        # two directions per pair, terms 0 and 1
        assert len(lines) == 1 + 2 * 2 * len(SERIES_POINTS)

    def test_no_field(self, run_config):
        config = with_changes(run_config, **{"field.kind": "none", "series.terms": 1})
        summary = kernel_series_flow(config)["summary"]
        assert summary["mass"] == pytest.approx(1.0, abs=2e-2)
        assert summary["mass"] == summary["dual_mass"]
        assert summary["mass_passed"]
        for pair in summary["pairs"]:
            assert pair["ratio"] == pytest.approx(1.0)

    @pytest.mark.slow
    def test_default_resolution_passes_checks(self, run_config):
        config = with_changes(
            run_config,
            **{"series.nodes": 64, "series.fft_size": 128, "series.terms": 2},
        )
        summary = kernel_series_flow(config)["summary"]
        assert summary["antisymmetry_passed"]
        assert summary["mass_passed"]
        assert summary["mass"] == pytest.approx(summary["dual_mass"], abs=1e-2)


class TestFirstIntegralsFlow:
    def test_rotation(self, run_config):
        result = first_integrals_flow(run_config)
        report = result["report"]
        assert report["e_star"] == pytest.approx(report["lambda_0"], rel=1e-8)
        assert report["phi0_projection_distance"] < 1e-8
        assert report["identity_defect"] < 1e-9
        assert report["conditioned_bound_holds"]
        assert "w_star" in result["paths"]
        lines = Path(result["paths"]["w_star"]).read_text().splitlines()
        assert lines[0] == "x1,x2,w"

    def test_spectrum_and_basis_files(self, run_config):
        result = first_integrals_flow(run_config)
        n = run_config.build_grid().n_interior
        k = result["report"]["k"]
        sigma = Path(result["paths"]["singular_values"]).read_text().splitlines()
        assert sigma[0] == "sigma"
        assert len(sigma) == 1 + n
        values = [float(line) for line in sigma[1:]]
        assert values == sorted(values, reverse=True)
        basis = Path(result["paths"]["basis"]).read_text().splitlines()
        assert basis[0].split(",") == ["x1", "x2"] + [f"q{j + 1}" for j in range(k)]
        assert len(basis) == 1 + n
        assert all(len(line.split(",")) == 2 + k for line in basis[1:])

    def test_constant_field(self, run_config):
        config = with_changes(run_config, **{"field.kind": "constant"})
        result = first_integrals_flow(config)
        assert result["report"]["k"] == 0
        assert "w_star" not in result["paths"]
        assert "invariance" not in result["report"]
        basis = Path(result["paths"]["basis"]).read_text().splitlines()
        assert basis[0] == "x1,x2"


@pytest.mark.slow
def test_mc_flow(run_config):
    result = mc_flow(run_config)
    summaries = result["summaries"]
    assert [s["A"] for s in summaries] == run_config.amplitudes
    for summary in summaries:
        assert summary["lambda_hat"] > 0
        assert summary["lambda_grid"] > 0
        assert summary["consistent"]
    out = Path(run_config.out_dir)
    assert (out / "survival_A20.csv").exists()
    assert (out / "mc_summary_A0.json.manifest.json").exists()
