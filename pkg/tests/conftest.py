import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robustpi import harness


def _config(name):
    return Path(harness.__file__).parent / "configs" / name


@pytest.fixture(scope="session")
def arm_config_path():
    return _config("arm.cfg")


@pytest.fixture(scope="session")
def scalar_config_path():
    return _config("scalar_lqr.cfg")


@pytest.fixture(scope="session")
def cascade_config_path():
    return _config("cascade_unmatched.cfg")


@pytest.fixture(scope="session")
def arm_run(arm_config_path, tmp_path_factory):
    """One full arm pipeline execution shared by the heavy tests."""
    import time

    cfg = harness.load_config(arm_config_path)
    cfg.out_dir = str(tmp_path_factory.mktemp("arm_run"))
    start = time.monotonic()
    run = harness.run_algorithm_1(cfg)
    run.analysis["pipeline_seconds"] = time.monotonic() - start
    return run


@pytest.fixture(scope="session")
def cascade_run(cascade_config_path, tmp_path_factory):
    """One full cascade pipeline execution shared by the heavy tests."""
    cfg = harness.load_config(cascade_config_path)
    cfg.out_dir = str(tmp_path_factory.mktemp("cascade_run"))
    return harness.run_algorithm_1(cfg)
