import numpy as np
import pytest

from rdoq import data, licnet


@pytest.fixture(scope="session")
def desk():
    return data.desk_dataset()


@pytest.fixture(scope="session")
def trained(desk):
    """Briefly trained default-size codec at the middle of the λ ladder."""
    return licnet.train_float(desk.train, 0.013, steps=300, seed=0, log_every=100)


@pytest.fixture(scope="session")
def calib_images(desk):
    """Four 64x64 calibration images cut from the calibration pool."""
    return np.ascontiguousarray(desk.calibration(4, seed=0)[:, :, 32:96, 32:96])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
