import numpy as np
import pytest

from dtireg.synthetic import PhantomSpec, make_phantom
from dtireg.volume_io import GridGeometry


@pytest.fixture(scope="session")
def phantom16():
    return make_phantom(PhantomSpec(dims=(16, 16, 16)))


@pytest.fixture(scope="session")
def phantom20():
    return make_phantom(PhantomSpec(dims=(20, 20, 20)))


@pytest.fixture(scope="session")
def phantom32():
    return make_phantom(PhantomSpec(dims=(32, 32, 32)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def geo8():
    return GridGeometry((8, 9, 10), (1.0, 1.5, 2.0), (-3.0, 0.5, 2.0))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_spd(rng, lo=0.1, hi=3.0):
    R = random_rotation(rng)
    return (R * rng.uniform(lo, hi, 3)) @ R.T


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def record(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
