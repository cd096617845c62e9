import numpy as np
import pytest
from hypothesis import settings

from rwre_lab.env import EnvDistribution, EnvironmentField, simple_walk

# jit compilation makes first calls slow
settings.register_profile("lab", deadline=None)
settings.load_profile("lab")


@pytest.fixture
def prop_walk():
    """Simple walk in d=2 with the e1-proportional perturbation."""
    om = simple_walk(2)
    return EnvDistribution.proportional([om], [1.0], [1.0, 0.0])


@pytest.fixture
def two_atom_balanced():
    om = np.array([[0.35, 0.35, 0.15, 0.15], [0.15, 0.15, 0.35, 0.35]])
    return EnvDistribution.proportional(om, [0.3, 0.7], [1.0, 0.0])


@pytest.fixture
def field_of():
    def make(dist, seed=0, period=None):
        return EnvironmentField(dist, seed, lateral_period=period)
    return make


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for the session summary: ``criterion(number, title, ok, detail)``."""
    def record(number, title, ok, detail=""):
        ACCEPTANCE_LINES.append((number, f"{'PASS' if ok else 'FAIL'} {number:>2} {title}: {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
