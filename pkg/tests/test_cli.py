import json

import pytest

from prefect_fracdrift import __version__
from prefect_fracdrift.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_SOLVER_ERROR,
    FLOWS,
    build_parser,
    main,
)


@pytest.fixture
def write_config(tmp_path):
    def _write(text):
        path = tmp_path / "run.cfg"
        path.write_text(text)
        return str(path)

    return _write


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == __version__


def test_every_flow_is_a_subcommand():
    parser = build_parser()
    for name in FLOWS:
        args = parser.parse_args([name, "--seed", "3"])
        assert args.command == name
        assert args.seed == 3


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["eigen"])
    assert exc.value.code == 2


def test_sweep(write_config, tmp_path):
    path = write_config("grid.h = 0.1\nsweep.A = 0, 5\n")
    out = tmp_path / "runs"
    assert main(["sweep", "--config", path, "--out", str(out)]) == EXIT_OK
    assert (out / "sweep.csv").exists()
    manifest = json.loads((out / "sweep.csv.manifest.json").read_text())
    assert manifest["stage"] == "sweep/sweep"


def test_empty_sweep_is_a_config_error(write_config, capsys):
    path = write_config("grid.h = 0.1\nsweep.A =\n")
    assert main(["sweep", "--config", path]) == EXIT_CONFIG_ERROR
    assert "sweep.A" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    missing = str(tmp_path / "missing.cfg")
    assert main(["checks", "--config", missing]) == EXIT_CONFIG_ERROR


def test_solver_failure(write_config, tmp_path, capsys):
    path = write_config("grid.h = 0.1\nsweep.A = 0\ntol.max_iter = 1\n")
    code = main(["sweep", "--config", path, "--out", str(tmp_path / "runs")])
    assert code == EXIT_SOLVER_ERROR
    assert "did not converge" in capsys.readouterr().err


@pytest.mark.slow
def test_failed_checks(write_config, tmp_path, capsys):
    path = write_config("grid.h = 0.1\nsweep.A = 0, 1\nfield.kind = compressible\n")
    code = main(["checks", "--config", path, "--out", str(tmp_path / "runs")])
    assert code == EXIT_CHECK_FAILED
    assert "skewness" in capsys.readouterr().err


def test_numerical_failure_is_not_a_config_error(write_config, tmp_path, capsys):
    path = write_config("grid.h = 0.1\nsweep.A = 0, 1\nfield.kind = compressible\n")
    out = str(tmp_path / "runs")
    code = main(["first-integrals", "--config", path, "--out", out])
    assert code == EXIT_SOLVER_ERROR
    assert "not skew" in capsys.readouterr().err


def test_invalid_value_is_a_config_error(write_config, capsys):
    path = write_config("grid.h = 0.1\nmc.n_paths = 0\n")
    assert main(["mc", "--config", path]) == EXIT_CONFIG_ERROR
    assert "mc.n_paths" in capsys.readouterr().err
