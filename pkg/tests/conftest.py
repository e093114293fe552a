import numpy as np
import pytest

from flowadmm import GaussianPrior, GmmPrior, SeededRng

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label, ok, detail):
        line = f"{label:<48s} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return SeededRng(20240917)


@pytest.fixture
def gauss_prior():
    """Anisotropic 4x4 Gaussian prior."""
    mean = np.linspace(0.2, 0.8, 16).reshape(4, 4)
    var = np.linspace(0.05, 1.5, 16).reshape(4, 4)
    return GaussianPrior(mean, var)


@pytest.fixture
def gmm2d():
    """Two-component 2-D mixture used by the low-dimensional oracles."""
    return GmmPrior(np.array([0.4, 0.6]), np.array([[-1.5, 0.5], [1.0, -1.0]]),
                    np.array([[0.3, 0.1], [0.2, 0.5]]))
