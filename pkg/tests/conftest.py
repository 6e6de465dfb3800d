import pytest

from msight.locfuse import RoiMap
from msight.sim.scene import DEFAULT_ORIGIN, default_rig


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def true_calibs(rig):
    return {k: c.true_calibration() for k, c in rig.items()}


@pytest.fixture(scope="session")
def roi():
    return RoiMap(DEFAULT_ORIGIN)
