import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qmarl.games import build_team_game
from qmarl.quantization import uniform_quantizer

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def team():
    return build_team_game()


@pytest.fixture(scope="session")
def q5():
    return uniform_quantizer(0.0, 1.0, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
