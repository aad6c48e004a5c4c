import numpy as np
import pytest

from pks_blowup.radial_numerics import build_grid


@pytest.fixture(scope="session")
def grid4096():
    return build_grid(n=4096)


@pytest.fixture(scope="session")
def grid2048():
    return build_grid(n=2048)


@pytest.fixture(scope="session")
def grid1024():
    return build_grid(n=1024)


def rel_max(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
