import math

import numpy as np
import pytest

from prefect_fracdrift.drift_fields import (
    assemble_drift,
    compact_profile,
    compressible_field,
    constant_field,
    rotational_field,
)
from prefect_fracdrift.exceptions import DomainError, FlowExitError, NonSkewDriftError
from prefect_fracdrift.first_integrals import (
    conditioned_bound_check,
    conditioning_identity_check,
    elementary_identity_defect,
    first_integral_space,
    integrate_flow,
    invariance_check,
    min_rayleigh,
    projection_distance,
    truncate,
    truncation_closure,
    upper_bound_check,
)
from prefect_fracdrift.green_spectral import combine, eigen_sweep, principal_eigenpair


@pytest.fixture(scope="module")
def swirl():
    return rotational_field(profile=compact_profile(0.8))


@pytest.fixture(scope="module")
def swirl_space(coarse_disk, swirl):
    return first_integral_space(assemble_drift(coarse_disk, swirl, 1.0))


@pytest.fixture(scope="module")
def pair(coarse_operator):
    return principal_eigenpair(combine(coarse_operator))


class TestIntegrateFlow:
    def test_quarter_turn(self):
        end = integrate_flow(rotational_field(), [1.0, 0.0], math.pi / 2, 1e-3)
        np.testing.assert_allclose(end, [0.0, 1.0], atol=1e-8)

    def test_backward_flow_returns(self, swirl):
        start = np.array([[0.3, 0.1], [-0.2, 0.4]])
        there = integrate_flow(swirl, start, 0.7, 1e-3)
        back = integrate_flow(swirl, there, -0.7, 1e-3)
        np.testing.assert_allclose(back, start, atol=1e-10)

    def test_zero_time(self, swirl):
        end = integrate_flow(swirl, [0.1, 0.2], 0.0, 1e-3)
        np.testing.assert_array_equal(end, [0.1, 0.2])

    def test_leaving_the_box(self):
        with pytest.raises(FlowExitError) as exc:
            integrate_flow(
                constant_field(), [0.0, 0.0], 2.0, 1e-3, box=((-1, -1), (1, 1))
            )
        assert exc.value.exit_time == pytest.approx(1.0, abs=1e-2)

    def test_rejects_nonpositive_step(self, swirl):
        with pytest.raises(DomainError):
            integrate_flow(swirl, [0.0, 0.0], 1.0, 0.0)


class TestFirstIntegralSpace:
    def test_basis_is_orthonormal(self, coarse_disk, swirl_space):
        gram = coarse_disk.weight * swirl_space.basis.T @ swirl_space.basis
        np.testing.assert_allclose(gram, np.eye(swirl_space.k), atol=1e-10)

    def test_basis_spans_kernel(self, coarse_disk, swirl, swirl_space):
        drift = assemble_drift(coarse_disk, swirl, 1.0)
        images = coarse_disk.h * (drift.matrix @ swirl_space.basis)
        sigma_max = swirl_space.singular_values[0]
        assert np.max(np.linalg.norm(images, axis=0)) <= 1e-7 * sigma_max

    def test_contains_orbit_functions(self, coarse_disk, swirl, swirl_space):
        drift = assemble_drift(coarse_disk, swirl, 1.0)
        moving = np.asarray(abs(drift.unit).sum(axis=1)).ravel() > 0
        expected = sum(
            1 if moving[orbit].any() else len(orbit)
            for orbit in coarse_disk.lattice_orbits()
        )
        assert swirl_space.k == expected
        radial = np.exp(-np.sum(coarse_disk.interior_points**2, axis=1))
        assert projection_distance(radial, swirl_space) < 1e-8

    def test_rigid_rotation_keeps_orbit_constants_only(self, coarse_disk):
        drift = assemble_drift(coarse_disk, rotational_field(), 1.0)
        space = first_integral_space(drift)
        assert space.k == len(coarse_disk.lattice_orbits())
        for column in space.basis.T:
            assert coarse_disk.orbit_spread(column) < 1e-6 * np.max(np.abs(column))

    def test_alternating_orbit_mode_is_dropped(self, coarse_disk):
        drift = assemble_drift(coarse_disk, rotational_field(), 1.0)
        space = first_integral_space(drift)
        orbit = coarse_disk.lattice_orbits()[0]
        alternating = np.zeros(coarse_disk.n_interior)
        alternating[orbit] = (-1.0) ** np.arange(len(orbit))
        assert np.linalg.norm(space.project(alternating)) < 1e-8

    def test_constant_drift_has_none(self, coarse_disk, coarse_operator):
        space = first_integral_space(assemble_drift(coarse_disk, constant_field(), 1.0))
        assert space.k == 0
        result = min_rayleigh(coarse_operator, space)
        assert math.isinf(result.e_star)
        assert result.w_star is None

    def test_zero_drift_keeps_everything(self, coarse_disk):
        space = first_integral_space(assemble_drift(coarse_disk, constant_field(), 0.0))
        assert space.k == coarse_disk.n_interior

    def test_compressible_drift(self, coarse_disk):
        with pytest.raises(NonSkewDriftError) as exc:
            first_integral_space(assemble_drift(coarse_disk, compressible_field(), 1.0))
        assert exc.value.defect == pytest.approx(1.0)

    @pytest.mark.parametrize("threshold", [0.0, 1.0, 2.0])
    def test_threshold_range(self, coarse_disk, swirl, threshold):
        with pytest.raises(DomainError):
            first_integral_space(assemble_drift(coarse_disk, swirl, 1.0), threshold)


class TestMinRayleigh:
    def test_rotation_limit_is_lambda_zero(self, coarse_operator, swirl_space, pair):
        result = min_rayleigh(coarse_operator, swirl_space)
        assert result.e_star == pytest.approx(pair.lam, rel=1e-8)
        distance = coarse_operator.grid.norm(result.w_star - pair.phi)
        assert distance < 1e-4
        assert projection_distance(pair.phi, swirl_space) < 1e-8

    def test_upper_bound(self, coarse_operator, swirl, swirl_space):
        sweep = eigen_sweep(coarse_operator, swirl, [0.0, 50.0])
        assert upper_bound_check(sweep, swirl_space, coarse_operator) <= 0.0

    def test_upper_bound_without_first_integrals(self, coarse_disk, coarse_operator):
        b = constant_field()
        space = first_integral_space(assemble_drift(coarse_disk, b, 1.0))
        sweep = eigen_sweep(coarse_operator, b, [0.0, 1.0])
        assert upper_bound_check(sweep, space, coarse_operator) == -math.inf


class TestInvariance:
    def test_radial_eigenfunction_is_invariant(self, coarse_disk, swirl, pair):
        assert invariance_check(pair.phi, coarse_disk, swirl) < 0.05

    def test_coordinate_is_not_invariant(self, coarse_disk, swirl):
        x1 = coarse_disk.interior_points[:, 0]
        assert invariance_check(x1, coarse_disk, swirl) > 0.05

    def test_truncation_stays_in_space(self, coarse_operator, swirl_space):
        w = min_rayleigh(coarse_operator, swirl_space).w_star
        level = 0.5 * np.max(np.abs(w))
        assert np.max(np.abs(truncate(w, level))) == pytest.approx(level)
        assert truncation_closure(w, level, swirl_space) < 1e-8


class TestConditioning:
    def test_elementary_identity(self):
        rng = np.random.default_rng(3)
        u_x, u_y = rng.standard_normal((2, 50))
        v_x, v_y = rng.uniform(0.5, 2.0, (2, 50))
        defect = elementary_identity_defect(u_x, u_y, v_x, v_y)
        assert np.max(np.abs(defect)) < 1e-12

    def test_identity_sides_agree(self, coarse_operator, swirl_space, pair):
        w = min_rayleigh(coarse_operator, swirl_space).w_star
        check = conditioning_identity_check(w, pair, coarse_operator, 1e-3)
        assert check.lhs == pytest.approx(check.rhs, rel=1e-6)
        assert check.identity_defect < 1e-9

    def test_identity_holds_for_any_function(self, coarse_disk, coarse_operator, pair):
        w = np.sin(3.0 * coarse_disk.interior_points[:, 1])
        check = conditioning_identity_check(w, pair, coarse_operator, 1e-2)
        assert check.lhs == pytest.approx(check.rhs, rel=1e-6)

    def test_conditioned_bound(self, coarse_operator, swirl_space, pair):
        w = min_rayleigh(coarse_operator, swirl_space).w_star
        bound = conditioned_bound_check(w, pair, coarse_operator, 0.5 * w.max(), 1e-3)
        assert bound.holds
        assert bound.energy >= bound.bound

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_rejects_nonpositive_eps(self, coarse_operator, pair, eps):
        with pytest.raises(DomainError):
            conditioning_identity_check(pair.phi, pair, coarse_operator, eps)
        with pytest.raises(DomainError):
            conditioned_bound_check(pair.phi, pair, coarse_operator, 1.0, eps)
