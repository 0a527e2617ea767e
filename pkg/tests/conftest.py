import pytest
from prefect.testing.utilities import prefect_test_harness

from prefect_fracdrift.config import RunConfig
from prefect_fracdrift.fractional_core import StableParams, assemble_fraclap
from prefect_fracdrift.geometry import Domain, build_grid


# added to eliminate warnings
def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: mark test as running a long simulation or large grid"
    )


@pytest.fixture(scope="session", autouse=True)
def prefect_db():
    with prefect_test_harness():
        yield


@pytest.fixture(scope="session")
def params():
    return StableParams(alpha=1.5)


@pytest.fixture(scope="session")
def coarse_disk():
    return build_grid(Domain.disk(1.0), h=0.1)


@pytest.fixture(scope="session")
def fine_disk():
    return build_grid(Domain.disk(1.0), h=0.05)


@pytest.fixture(scope="session")
def coarse_operator(coarse_disk, params):
    return assemble_fraclap(coarse_disk, params)


@pytest.fixture(scope="session")
def fine_operator(fine_disk, params):
    return assemble_fraclap(fine_disk, params)


@pytest.fixture
def run_config(tmp_path):
    return RunConfig.from_flat(
        {
            "grid.h": 0.1,
            "sweep.A": [0, 5, 20],
            "mc.n_paths": 2000,
            "mc.batch_size": 1000,
            "mc.dt": 2e-3,
            "mc.t_max": 1.5,
            "series.nodes": 16,
            "series.fft_size": 64,
            "out.dir": str(tmp_path / "out"),
        }
    )


@pytest.fixture(autouse=True)
def reset_object_registry():
    """
    Ensures each test has a clean object registry.
    """
    from prefect.context import PrefectObjectRegistry

    with PrefectObjectRegistry():
        yield
