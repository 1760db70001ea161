import numpy as np
import pytest

from hmra2d.observation_model import generate_phantoms
from hmra2d.steerable_basis import build_basis


@pytest.fixture(scope="session")
def fb33():
    return build_basis(33)


@pytest.fixture(scope="session")
def fb65():
    return build_basis(65)


@pytest.fixture(scope="session")
def phantoms65():
    return generate_phantoms(3, 65, seed=7)


def random_coeffs(rng, ks, size=()):
    """Complex Gaussian coefficients with real k = 0 entries."""
    ks = np.asarray(ks)
    shape = tuple(np.atleast_1d(size)) + (ks.size,) if size != () else (ks.size,)
    a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    a[..., ks == 0] = a[..., ks == 0].real
    return a


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Store and print one acceptance line; the test then asserts ``passed``."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
