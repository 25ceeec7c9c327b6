import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scl.core import SectorRegistry, build_profile
from scl.fixtures import load_worked_example

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REACTIVE = [[0.2, 0.9, 0.1], [0.1, 0.3, 0.1], [0.0, 0.2, 0.4]]
DELIBERATIVE = [[0.2, 0.5, 0.8], [0.2, 0.4, 0.3], [0.1, 0.7, 0.5]]
PREDICTED = [[0.2, 0.25, 0.88], [0.2, 0.4, 0.3], [0.1, 0.77, 0.60]]


@pytest.fixture
def registry():
    return SectorRegistry.standard(["perc", "plan", "refl"])


@pytest.fixture
def worked():
    return load_worked_example()


@pytest.fixture
def two_level(registry):
    return build_profile(registry, {0: REACTIVE, 1: DELIBERATIVE}, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
