import sys
import numpy as np
import pytest

from nvstorm.camera import CameraConfig
from nvstorm.physics import EmitterModel, IlluminationConfig, scale_rates


@pytest.fixture
def camera():
    return CameraConfig()


@pytest.fixture
def burst_rates():
    return scale_rates(IlluminationConfig(tau_on_ref_s=4.0, tau_off_ref_s=36.0, gamma_ref_cps=175.0))


@pytest.fixture
def centre_emitter():
    return EmitterModel(1234.5, 1187.3)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
