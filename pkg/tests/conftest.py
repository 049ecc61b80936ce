import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fbsr.filterbank import FilterBank
from fbsr.signal import Kernel

ACCEPTANCE_LINES = []


def orthonormal_haar():
    s = 1.0 / math.sqrt(2.0)
    return FilterBank(2, (Kernel([s, s], 1), Kernel([s, -s], 1)),
                      (Kernel([s, s], 0), Kernel([-s, s], 0)))


def dyadic_haar():
    """Haar pair scaled so every product is exact in binary floating point."""
    return FilterBank(2, (Kernel([0.5, 0.5], 1), Kernel([0.5, -0.5], 1)),
                      (Kernel([1.0, 1.0], 0), Kernel([-1.0, 1.0], 0)))


def random_bank(rng, M, L):
    ana = tuple(Kernel(rng.normal(size=L), int(rng.integers(0, L))) for _ in range(M))
    syn = tuple(Kernel(rng.normal(size=L), int(rng.integers(0, L))) for _ in range(M))
    return FilterBank(M, ana, syn, h0_frozen=True)


@pytest.fixture
def haar():
    return orthonormal_haar()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
