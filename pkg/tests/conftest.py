import math

import numpy as np
import pytest

from ifmsim.config import default_config

ACCEPTANCE_LINES = []


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def ideal_cfg():
    """All noise processes and shot noise switched off."""
    return default_config().updated(**{
        "noise.contrast": 1.0,
        "noise.polarization": 1.0,
        "noise.flipper_efficiencies": [1.0, 1.0],
        "noise.poisson": False,
    })


def random_density_matrix(rng, rank=None):
    rank = rank or rng.integers(1, 5)
    g = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
