import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epiflow.energy import ModelParams
from epiflow.flow import StepSchedule, cosine_profile, evolve, random_profile
from epiflow.spectral import make_grid

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Lines reported by the acceptance suite, printed in the terminal summary.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def grid64():
    return make_grid(64)


@pytest.fixture(scope="session")
def grid128():
    return make_grid(128)


@pytest.fixture(scope="session")
def unit():
    return ModelParams(1.0)


@pytest.fixture(scope="session")
def canonical_run(grid128, unit):
    u0 = cosine_profile(grid128, 1.0, 0.3, 1)
    return evolve(u0, StepSchedule(t_final=2.0, checkpoint_times=(0.5, 1.0)), unit)


@pytest.fixture(scope="session")
def stress_run(grid128, unit):
    u0 = cosine_profile(grid128, 1.0, 0.8, 1)
    return evolve(u0, StepSchedule(t_final=2.0), unit)


def random_profiles(grid, a, count, seed, max_amp=0.5):
    rng = np.random.default_rng(seed)
    kc = grid.dealias_cutoff
    return [
        random_profile(grid, a, float(rng.uniform(0.05, max_amp)), int(rng.integers(1, kc + 1)), int(rng.integers(2**31)))
        for _ in range(count)
    ]


def rel(x, y):
    return abs(x - y) / max(abs(y), 1e-300)


TWO_PI = 2.0 * math.pi
