import numpy as np
import pytest

from prefect_fracdrift.drift_fields import (
    FieldKind,
    Stencil,
    assemble_drift,
    check_peclet,
    compact_profile,
    compressible_field,
    constant_field,
    divergence_certificate,
    load_stream_table,
    peclet_stabilization,
    peclet_threshold,
    rotational_field,
    skewness_defect,
    stream_field,
)
from prefect_fracdrift.exceptions import DomainError
from prefect_fracdrift.fractional_core import patch_coefficient
from prefect_fracdrift.utilities import write_csv


def compact_stream(points, radius=0.8):
    s = np.sum(points**2, axis=-1)
    return radius**2 / 8.0 * np.clip(1.0 - s / radius**2, 0.0, None) ** 4


class TestFields:
    def test_rotational_field_is_tangent(self):
        b = rotational_field(profile=compact_profile(0.8))
        points = np.array([[0.3, 0.0], [0.0, -0.5], [0.2, 0.2]])
        velocity = b(points)
        np.testing.assert_allclose(np.sum(velocity * points, axis=1), 0.0, atol=1e-15)
        assert b.bounded

    def test_compact_profile_support(self):
        b = rotational_field(profile=compact_profile(0.8))
        np.testing.assert_array_equal(b([[0.9, 0.0]]), [[0.0, 0.0]])

    def test_rigid_rotation_is_unbounded(self):
        b = rotational_field(center=(1.0, 1.0))
        assert not b.bounded
        np.testing.assert_allclose(b([[2.0, 1.0]]), [[0.0, 1.0]])

    def test_constant_field(self):
        b = constant_field((0.0, 2.0))
        np.testing.assert_array_equal(b(np.zeros((3, 2))), [[0.0, 2.0]] * 3)

    def test_compressible_field(self, coarse_disk):
        b = compressible_field()
        assert not b.divergence_free
        assert divergence_certificate(coarse_disk, b) == pytest.approx(1.0)


class TestStreamFields:
    def test_discrete_curl_is_divergence_free(self, coarse_disk):
        b = stream_field(compact_stream, coarse_disk)
        assert b.kind is FieldKind.STREAM
        assert divergence_certificate(coarse_disk, b) < 1e-12

    def test_rejects_nonzero_exterior_values(self, coarse_disk):
        with pytest.raises(DomainError, match="vanish"):
            stream_field(np.ones(coarse_disk.shape), coarse_disk)

    def test_rejects_wrong_shape(self, coarse_disk):
        with pytest.raises(DomainError, match="does not match"):
            stream_field(np.zeros((3, 3)), coarse_disk)

    def test_load_stream_table(self, coarse_disk, tmp_path):
        points = coarse_disk.interior_points
        rows = zip(points[:, 0], points[:, 1], compact_stream(points))
        path = write_csv(tmp_path / "psi.csv", ("x1", "x2", "psi"), rows)
        loaded = load_stream_table(path, coarse_disk)
        expected = stream_field(compact_stream, coarse_disk)
        assert loaded.kind is FieldKind.STREAM_TABLE
        np.testing.assert_allclose(
            loaded.on_nodes(coarse_disk), expected.on_nodes(coarse_disk), atol=1e-14
        )

    def test_table_point_off_lattice(self, coarse_disk, tmp_path):
        path = write_csv(tmp_path / "psi.csv", ("x1", "x2", "psi"), [(0.01, 0.0, 1.0)])
        with pytest.raises(DomainError, match="not a lattice node"):
            load_stream_table(path, coarse_disk)

    def test_sampled_field_refuses_other_lattice(self, coarse_disk, fine_disk):
        b = stream_field(compact_stream, coarse_disk)
        with pytest.raises(DomainError, match="different lattice"):
            b.on_nodes(fine_disk)


class TestAssembleDrift:
    def test_rotation_uses_orbit_stencil(self, coarse_disk):
        b = rotational_field(profile=compact_profile(0.8))
        drift = assemble_drift(coarse_disk, b, 1.0)
        assert drift.stencil is Stencil.ORBIT
        assert skewness_defect(drift.unit) == 0.0

    def test_orbit_stencil_annihilates_radial_functions(self, coarse_disk):
        b = rotational_field(profile=compact_profile(0.8))
        drift = assemble_drift(coarse_disk, b, 3.0)
        radial = np.exp(-np.sum(coarse_disk.interior_points**2, axis=1))
        np.testing.assert_allclose(drift.apply(radial), 0.0, atol=1e-12)

    def test_orbit_stencil_needs_rotation(self, coarse_disk):
        with pytest.raises(DomainError, match="orbit stencil"):
            assemble_drift(coarse_disk, constant_field(), 1.0, stencil="orbit")

    def test_off_center_rotation_falls_back_to_lattice(self, coarse_disk):
        b = rotational_field(center=(0.1, 0.0), profile=compact_profile(0.5))
        assert assemble_drift(coarse_disk, b, 1.0).stencil is Stencil.LATTICE

    def test_stream_field_is_skew(self, coarse_disk):
        b = stream_field(compact_stream, coarse_disk)
        drift = assemble_drift(coarse_disk, b, 1.0)
        scale = np.max(np.abs(drift.unit.data))
        assert skewness_defect(drift.unit) < 1e-12 * scale

    def test_constant_field_is_skew(self, coarse_disk):
        drift = assemble_drift(coarse_disk, constant_field(), 1.0)
        assert skewness_defect(drift.unit) == 0.0

    def test_compressible_field_is_not_skew(self, coarse_disk):
        drift = assemble_drift(coarse_disk, compressible_field(), 1.0)
        assert skewness_defect(drift.unit) == pytest.approx(1.0)

    def test_lattice_stencil_differentiates_linear_functions(self, coarse_disk):
        drift = assemble_drift(coarse_disk, constant_field((1.0, 0.0)), 2.0)
        x1 = coarse_disk.interior_points[:, 0]
        inner = coarse_disk.delta > 2 * coarse_disk.h
        np.testing.assert_allclose(drift.apply(x1)[inner], 2.0)

    def test_amplitude(self, coarse_disk):
        drift = assemble_drift(coarse_disk, constant_field(), 1.0)
        scaled = drift.with_amplitude(4.0)
        f = coarse_disk.interior_points[:, 1] ** 2 + coarse_disk.delta
        np.testing.assert_allclose(scaled.apply(f), 4.0 * drift.apply(f))
        assert drift.with_amplitude(0.0).is_zero
        assert not drift.is_zero


class TestPeclet:
    def test_threshold(self, coarse_disk, params):
        expected = 2.0 * patch_coefficient(0.1, params) / 0.1
        assert peclet_threshold(coarse_disk, params) == pytest.approx(expected)

    def test_check(self, coarse_disk, params):
        threshold = peclet_threshold(coarse_disk, params)
        b = constant_field((1.0, 0.0))
        assert check_peclet(coarse_disk, b, 0.5 * threshold, params)
        assert not check_peclet(coarse_disk, b, 2.0 * threshold, params)

    def test_stabilization_vanishes_below_threshold(
        self, coarse_disk, coarse_operator, params
    ):
        threshold = peclet_threshold(coarse_disk, params)
        drift = assemble_drift(coarse_disk, constant_field(), 0.5 * threshold)
        assert peclet_stabilization(coarse_operator.matrix, drift).nnz == 0
        assert peclet_stabilization(coarse_operator.matrix, None).nnz == 0

    @pytest.mark.parametrize("A", [40.0, 400.0])
    def test_stabilization_is_a_zero_sum_laplacian(
        self, coarse_disk, coarse_operator, A
    ):
        drift = assemble_drift(coarse_disk, constant_field(), A)
        S = peclet_stabilization(coarse_operator.matrix, drift)
        scale = abs(S).max()
        assert S.nnz > 0
        assert abs(S - S.T).max() <= 1e-12 * scale
        np.testing.assert_allclose(S.sum(axis=1).A1, 0.0, atol=1e-12 * scale)

    @pytest.mark.parametrize("A", [40.0, 400.0])
    def test_stabilized_operator_is_a_z_matrix(self, coarse_disk, coarse_operator, A):
        drift = assemble_drift(coarse_disk, constant_field(), A)
        K = coarse_operator.matrix
        M = K + peclet_stabilization(K, drift).toarray() - drift.matrix.toarray()
        off = M - np.diag(np.diag(M))
        assert off.max() <= 1e-12 * np.abs(M).max()

    def test_stabilization_depends_on_magnitude(self, coarse_disk, coarse_operator):
        drift = assemble_drift(coarse_disk, constant_field(), 40.0)
        K = coarse_operator.matrix
        plus = peclet_stabilization(K, drift)
        minus = peclet_stabilization(K, drift.with_amplitude(-40.0))
        assert abs(plus - minus).max() == 0.0
