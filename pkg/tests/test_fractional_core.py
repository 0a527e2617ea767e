import math

import numpy as np
import pytest
import scipy.io
import scipy.linalg
from scipy import special

from prefect_fracdrift.exceptions import DomainError
from prefect_fracdrift.fractional_core import (
    StableParams,
    assemble_fraclap,
    boundary_flux,
    box_tail,
    dirichlet_form,
    free_kernel,
    free_kernel_gradient,
    levy_density,
    patch_coefficient,
    quadratic_form_from_weights,
    stable_constant,
    symbol_accuracy,
    symbol_by_quadrature,
)
from prefect_fracdrift.geometry import Domain, build_grid
from prefect_fracdrift.kernel_series import free_kernel_box_mass


class TestStableParams:
    def test_constant_at_three_halves(self):
        assert stable_constant(1.5) == pytest.approx(0.1711671, rel=1e-6)

    def test_constant_at_one(self):
        assert stable_constant(1.0) == pytest.approx(1.0 / (2.0 * math.pi))

    @pytest.mark.parametrize("alpha", [1.0, 2.0, 0.5, 2.5])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(DomainError, match="alpha"):
            StableParams(alpha)

    def test_only_planar(self):
        with pytest.raises(DomainError):
            StableParams(1.5, d=3)

    def test_levy_density(self, params):
        assert levy_density([0.5, 0.0], params) == pytest.approx(
            params.A * 0.5**-3.5
        )
        with pytest.raises(DomainError):
            levy_density([[0.0, 0.0]], params)

    @pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
    def test_symbol_by_quadrature(self, alpha):
        p = StableParams(alpha)
        assert symbol_by_quadrature([2.0, 0.0], p) == pytest.approx(
            2.0**alpha, rel=1e-4
        )
        assert symbol_by_quadrature([0.0, 0.0], p) == 0.0


class TestNearAndFarField:
    def test_patch_coefficient_scaling(self, params):
        ratio = patch_coefficient(0.2, params) / patch_coefficient(0.1, params)
        assert ratio == pytest.approx(2.0 ** (2.0 - params.alpha), rel=1e-12)

    def test_box_tail_scaling(self, params):
        small = box_tail([[0.0, 0.0]], (-1.0, -1.0), (1.0, 1.0), params)
        large = box_tail([[0.0, 0.0]], (-2.0, -2.0), (2.0, 2.0), params)
        assert large[0] / small[0] == pytest.approx(2.0**-params.alpha, rel=1e-10)

    def test_box_tail_between_disk_tails(self, params):
        def disk_tail(radius):
            return 2.0 * math.pi * params.A * radius**-params.alpha / params.alpha

        tail = box_tail([[0.0, 0.0]], (-1.0, -1.0), (1.0, 1.0), params)[0]
        assert disk_tail(math.sqrt(2.0)) < tail < disk_tail(1.0)

    @pytest.mark.parametrize("h, expected", [(0.1, 0.22268), (0.05, 0.157458)])
    def test_patch_coefficient_carries_the_moment_defect(self, params, h, expected):
        assert patch_coefficient(h, params) == pytest.approx(expected, rel=1e-4)

    def test_boundary_flux_sits_on_cut_links(self, coarse_disk, params):
        c = patch_coefficient(coarse_disk.h, params)
        flux = boundary_flux(coarse_disk, c)
        cut = np.any(coarse_disk.link_fractions < 1.0, axis=1)
        assert np.all(flux[~cut] == 0.0)
        assert np.all(flux[cut] > 0.0)
        assert flux.max() <= 4.0 * c / coarse_disk.h**2 * (1.0 / 0.05 - 1.0)


class TestAssembleFraclap:
    def test_symmetric(self, coarse_operator):
        K = coarse_operator.matrix
        assert np.max(np.abs(K - K.T)) <= 1e-14 * np.max(np.abs(K))

    def test_m_matrix_structure(self, coarse_operator):
        K = coarse_operator.matrix
        off_diagonal = K - np.diag(np.diag(K))
        assert np.all(off_diagonal <= 0.0)
        assert np.all(coarse_operator.killing > 0.0)
        np.testing.assert_allclose(
            K.sum(axis=1), coarse_operator.killing, rtol=1e-9, atol=1e-9
        )

    def test_positive_definite(self, coarse_operator):
        assert scipy.linalg.eigvalsh(coarse_operator.matrix)[0] > 0.0

    def test_quadratic_form_from_weights(self, coarse_operator, coarse_disk):
        f = np.cos(coarse_disk.interior_points[:, 0]) + coarse_disk.delta
        assert quadratic_form_from_weights(f, coarse_operator) == pytest.approx(
            dirichlet_form(f, f, coarse_operator), rel=1e-10
        )

    def test_dirichlet_form_shape_mismatch(self, coarse_operator):
        with pytest.raises(ValueError, match="do not match"):
            dirichlet_form(np.ones(3), np.ones(3), coarse_operator)

    def test_apply_is_negative_matrix(self, coarse_operator):
        f = np.ones(coarse_operator.size)
        np.testing.assert_allclose(
            coarse_operator.apply(f), -coarse_operator.matrix @ f
        )

    def test_scaling_with_domain_size(self, params):
        def smallest(radius, h):
            grid = build_grid(Domain.disk(radius), h, margin=2.5 * radius * 0.1)
            return scipy.linalg.eigvalsh(assemble_fraclap(grid, params).matrix)[0]

        ratio = smallest(2.0, 0.2) / smallest(1.0, 0.1)
        assert ratio == pytest.approx(2.0**-params.alpha, rel=1e-8)

    def test_matrix_market(self, coarse_operator, tmp_path):
        path = coarse_operator.to_matrix_market(tmp_path / "K.mtx")
        loaded = scipy.io.mmread(str(path)).toarray()
        np.testing.assert_allclose(loaded, coarse_operator.matrix, rtol=1e-14)

    @pytest.mark.slow
    @pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
    def test_symbol_accuracy(self, alpha):
        assert symbol_accuracy(StableParams(alpha=alpha)) < 0.05


class TestFreeKernel:
    @pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
    def test_value_at_origin(self, params, t):
        alpha = params.alpha
        expected = special.gamma(2.0 / alpha) / (
            2.0 * math.pi * alpha * t ** (2.0 / alpha)
        )
        assert free_kernel(t, [0.0, 0.0], params) == pytest.approx(expected, rel=1e-6)

    def test_decreasing_in_distance(self, params):
        values = free_kernel(0.5, [[0.0, 0.0], [0.3, 0.0], [0.0, 0.6]], params)
        assert values[0] > values[1] > values[2] > 0.0

    def test_rejects_nonpositive_time(self, params):
        with pytest.raises(DomainError):
            free_kernel(0.0, [0.0, 0.0], params)

    def test_gradient_matches_difference_quotient(self, params):
        step = 1e-4
        x = np.array([0.3, 0.2])
        gradient = free_kernel_gradient(0.5, x, params)
        for k in (0, 1):
            e = np.zeros(2)
            e[k] = step
            quotient = (
                free_kernel(0.5, x + e, params) - free_kernel(0.5, x - e, params)
            ) / (2.0 * step)
            assert gradient[k] == pytest.approx(quotient, rel=1e-5)

    def test_gradient_vanishes_at_origin(self, params):
        np.testing.assert_array_equal(
            free_kernel_gradient(0.5, np.zeros(2), params), np.zeros(2)
        )

    @pytest.mark.parametrize("x", [[0.3, 0.0], [0.5, -1.2], [4.0, 3.0]])
    def test_scaling_law(self, params, x):
        t = 0.5
        x = np.asarray(x)
        scaled = t ** (-1.0 / params.alpha) * x
        expected = t ** (-2.0 / params.alpha) * free_kernel(1.0, scaled, params)
        assert free_kernel(t, x, params) == pytest.approx(expected, rel=1e-8)

    def test_normalization(self, params):
        radius = 40.0
        inside = free_kernel_box_mass(1.0, params, radius=radius)
        corner = (radius, radius)
        beyond = box_tail(np.zeros((1, 2)), (-radius, -radius), corner, params)
        assert inside < 1.0
        assert inside + beyond[0] == pytest.approx(1.0, abs=1e-3)

    def test_normalization_with_light_tail(self):
        p = StableParams(alpha=1.8)
        assert free_kernel_box_mass(1.0, p, radius=40.0) == pytest.approx(1.0, abs=1e-3)

    def test_comparable_to_jump_density(self, params):
        r = np.geomspace(0.1, 20.0, 60)
        density = free_kernel(1.0, np.column_stack([r, np.zeros_like(r)]), params)
        ratio = density / np.minimum(1.0, r ** (-2.0 - params.alpha))
        assert ratio.min() > 0.0
        assert ratio.max() / ratio.min() < 10.0
