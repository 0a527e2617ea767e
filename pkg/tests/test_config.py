from pathlib import Path

import numpy as np
import pytest

from prefect_fracdrift.config import FLAT_KEYS, RunConfig
from prefect_fracdrift.drift_fields import FieldKind
from prefect_fracdrift.exceptions import ConfigError
from prefect_fracdrift.geometry import DomainKind
from prefect_fracdrift.mc_validator import DriftScheme, StartDistribution


class TestDefaults:
    def test_defaults(self):
        config = RunConfig()
        assert config.alpha == 1.5
        assert config.domain.kind == DomainKind.DISK.value
        assert config.drift.kind == FieldKind.ROTATIONAL.value
        assert config.amplitudes == [0.0, 10.0, 40.0, 160.0]
        assert config.out_dir == Path("fracdrift-out")

    def test_flat_items_cover_known_keys(self):
        items = RunConfig().flat_items()
        assert set(items) <= set(FLAT_KEYS)
        # unset optional settings are left out
        assert "grid.margin" not in items
        assert "field.table" not in items

    def test_amplitudes_are_sorted(self):
        config = RunConfig.from_flat({"sweep.A": [20, 0, 5]})
        assert config.amplitudes == [0.0, 5.0, 20.0]


class TestFlatText:
    def test_round_trip(self):
        config = RunConfig.from_flat(
            {"alpha": 1.25, "grid.h": 0.1, "sweep.A": [0, 0.1, 7], "seed": 3}
        )
        reloaded = RunConfig.from_flat_text(config.to_flat_text())
        assert reloaded.config_hash() == config.config_hash()
        assert reloaded.flat_items() == config.flat_items()

    def test_comments_and_blank_lines(self):
        text = "# disk run\n\nalpha = 1.25  # lighter tails\nsweep.A = 0, 10\n"
        config = RunConfig.from_flat_text(text)
        assert config.alpha == 1.25
        assert config.amplitudes == [0.0, 10.0]

    def test_malformed_line(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_flat_text("# comment\n\nalpha 1.5\n")
        assert exc.value.key == "line 3"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key") as exc:
            RunConfig.from_flat_text("grid.spacing = 0.1\n")
        assert exc.value.key == "grid.spacing"

    def test_overrides(self):
        config = RunConfig.from_flat_text(
            "alpha = 1.2\n", {"out.dir": "runs", "seed": None}
        )
        assert config.alpha == 1.2
        assert config.out_dir == Path("runs")
        assert config.seed == 0

    def test_hash_depends_on_settings(self):
        assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()

    def test_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("grid.h = 0.2\nfield.kind = constant\n")
        config = RunConfig.from_file(path)
        assert config.grid.h == 0.2
        assert config.drift.kind == "constant"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            RunConfig.from_file(tmp_path / "missing.cfg")


class TestValidation:
    @pytest.mark.parametrize(
        "text, key",
        [
            ("sweep.A =\n", "sweep.A"),
            ("mc.n_paths = 0\n", "mc.n_paths"),
            ("mc.dt = 0.01\nmc.t_max = 0.01\n", "mc.t_max"),
            ("alpha = 2.0\n", "alpha"),
            ("grid.h = -0.1\n", "grid.h"),
            ("grid.h = 0.1\ngrid.margin = 0.1\n", "grid.margin"),
            (
                "domain.kind = annulus\ndomain.inner_radius = 1.5\n",
                "domain.inner_radius",
            ),
            ("domain.kind = square\n", "domain.kind"),
            ("field.kind = vortex\n", "field.kind"),
            ("field.kind = custom-stream-table\n", "field.table"),
            ("tol.svd = 2\n", "tol.svd"),
            ("series.nodes = 10\n", "series.nodes"),
            ("series.terms = 4\n", "series.terms"),
            ("seed = -1\n", "seed"),
        ],
    )
    def test_error_names_flat_key(self, text, key):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_flat_text(text)
        assert exc.value.key == key
        assert str(exc.value).startswith(f"{key}: ")

    def test_empty_sweep_message(self):
        with pytest.raises(ConfigError, match="must not be empty"):
            RunConfig.from_flat({"sweep.A": []})

    def test_choices_are_case_insensitive(self):
        config = RunConfig.from_flat({"field.kind": "Stream", "mc.scheme": "EULER"})
        assert config.drift.kind == "stream"
        assert config.monte_carlo.scheme == "euler"


class TestBuilders:
    @pytest.fixture
    def coarse(self):
        return {"grid.h": 0.2}

    def test_no_field(self, coarse):
        config = RunConfig.from_flat({**coarse, "field.kind": "none"})
        assert config.build_field() is None

    def test_compact_rotation(self, coarse):
        b = RunConfig.from_flat(coarse).build_field()
        assert b.kind is FieldKind.ROTATIONAL
        assert b.bounded
        np.testing.assert_allclose(b([[0.9, 0.0]]), [[0.0, 0.0]])

    def test_rigid_rotation(self, coarse):
        b = RunConfig.from_flat({**coarse, "field.profile": "rigid"}).build_field()
        assert not b.bounded
        np.testing.assert_allclose(b([[0.5, 0.0]]), [[0.0, 0.5]])

    def test_constant(self, coarse):
        config = RunConfig.from_flat(
            {**coarse, "field.kind": "constant", "field.direction": [0, 1]}
        )
        np.testing.assert_allclose(config.build_field()([[0.3, 0.3]]), [[0.0, 1.0]])

    def test_compressible(self, coarse):
        config = RunConfig.from_flat({**coarse, "field.kind": "compressible"})
        assert not config.build_field().divergence_free

    def test_stream(self, coarse):
        config = RunConfig.from_flat({**coarse, "field.kind": "stream"})
        grid = config.build_grid()
        b = config.build_field(grid)
        assert b.kind is FieldKind.STREAM
        assert b.on_nodes(grid).shape == grid.shape + (2,)

    def test_grid(self, coarse):
        grid = RunConfig.from_flat(coarse).build_grid()
        assert grid.h == 0.2
        assert grid.n_interior > 0

    def test_path_config(self, run_config):
        cfg = run_config.path_config(start="fixed")
        assert cfg.n_paths == 2000
        assert cfg.batch_size == 1000
        assert cfg.dt == pytest.approx(2e-3)
        assert cfg.start is StartDistribution.FIXED
        assert cfg.start_point == (0.0, 0.0)
        assert cfg.drift_scheme is DriftScheme.EULER

    def test_series_resolution(self, run_config):
        resolution = run_config.series_resolution()
        assert resolution.nodes == 16
        assert resolution.fft_size == 64
        assert resolution.tolerance == pytest.approx(0.05)

    def test_stable_params(self, run_config):
        assert run_config.stable_params().alpha == 1.5
