import numpy as np
import pytest

from nehari import Potential, build_cutoffs, build_dumbbell
from nehari.grid_domain import GridDomain

CHAMBERS = [(0, 0, 1, 1), (1.5, 0, 2.5, 1)]
THIN = [(1, 0.45, 1.5, 0.55)]
THINNER = [(1, 0.475, 1.5, 0.525)]


def point_domain():
    """1-D interval (0, 1) with one interior node, h = 1/2."""
    return GridDomain.from_mask(np.array([False, True, False]), 0.5)


@pytest.fixture
def point_dom():
    return point_domain()


@pytest.fixture(scope="session")
def square16():
    return build_dumbbell([(0, 0, 1, 1)], [], 1 / 16)


@pytest.fixture(scope="session")
def dumbbell():
    return build_dumbbell(CHAMBERS, THIN, 1 / 32)


@pytest.fixture(scope="session")
def dumbbell_cuts(dumbbell):
    return build_cutoffs(dumbbell, 0.125)


@pytest.fixture(scope="session")
def cubic1():
    return Potential.cubic([1.0])


@pytest.fixture(scope="session")
def sweep_k1(dumbbell, cubic1):
    from nehari import run_multiplicity

    return run_multiplicity(dumbbell, cubic1, ramp_width=0.125)
