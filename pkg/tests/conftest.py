import numpy as np
import pytest

from smmgmm.data import make_dataset
from smmgmm.numerics import RngStream
from smmgmm.simulate import draw, m1, m2

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def binary_sample(seed, n=400, k=3, effect=0.5):
    """Binary X and Y with a K-level instrument that shifts P(X=1)."""
    rng = np.random.default_rng(seed)
    z = rng.integers(0, k, n)
    u = rng.random(n)
    x = (rng.random(n) < 0.2 + 0.5 * z / max(k - 1, 1) + 0.1 * (u - 0.5)).astype(float)
    y = (rng.random(n) < 0.15 + 0.2 * u + effect * 0.3 * x).astype(float)
    return make_dataset(y, x, z)


@pytest.fixture
def m1_data():
    return draw(m1(n=5000), RngStream(7, 0))


@pytest.fixture
def m2_data():
    return draw(m2(n=5000), RngStream(7, 0))
