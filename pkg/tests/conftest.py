import sys

import numpy as np
import pytest

from fqv.partitions import dyadic_sequence
from fqv.paths import generate_brownian, generate_fbm, linear_path

BIG_M = 2 ** 20


@pytest.fixture(scope="session")
def bm42():
    """The reference path: Brownian, seed 42, T = 1, M = 2^20."""
    return generate_brownian(1, 1.0, BIG_M, 42)


@pytest.fixture(scope="session")
def ladder():
    return dyadic_sequence(BIG_M, 6, 16)


@pytest.fixture(scope="session")
def bm_small():
    return generate_brownian(1, 1.0, 2 ** 12, 42)


@pytest.fixture(scope="session")
def bm2d_small():
    return generate_brownian(2, 1.0, 2 ** 12, 5)


@pytest.fixture(scope="session")
def line():
    return linear_path(1.0, 2 ** 12)


class ZeroNormals:
    """Stand-in generator whose normal draws are all zero."""

    def standard_normal(self, size):
        return np.zeros(size)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
