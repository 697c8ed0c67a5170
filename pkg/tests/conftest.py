import numpy as np
import pytest

from cplearn.env import ArithChain, GridPlan


@pytest.fixture
def arith():
    return ArithChain()


@pytest.fixture
def grid():
    return GridPlan()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, idx, h=1e-5):
    """Central finite differences of scalar ``f`` at ``x`` along coordinates ``idx``."""
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
