import numpy as np
import pytest

from feddm.data import gen_blobs
from feddm.models import Architecture, Model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return gen_blobs(50, 4, 2, 0.5, seed=0)


@pytest.fixture
def small_mlp():
    return Model.create(Architecture.mlp((2, 8, 4)), seed=0)


@pytest.fixture
def small_convnet():
    return Model.create(Architecture.convnet_lite((1, 8, 8), 3, channels=(2, 3)), seed=0)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES = []


def report(number, passed, detail):
    """``passed=None`` marks a criterion that could not be evaluated here."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {number:>2}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
