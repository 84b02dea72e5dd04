import math

import numpy as np
import pytest

from islag.ambient import AmbientStructure, Density
from islag.config import Resolution
from islag.fixtures import (cap_fixture, cap_levels, line_fixture,
                            orbit_boundaries, orbit_isl_cylinder)


@pytest.fixture(scope="session")
def amb2():
    return AmbientStructure(2)


@pytest.fixture(scope="session")
def amb1():
    return AmbientStructure(1)


@pytest.fixture(scope="session")
def hl_setup(amb2):
    """Exact orbit ISL cylinder with its plane boundaries (M=32, K=16)."""
    c, s0, s1 = 1.0, 0.4, 1.2
    mesh = orbit_isl_cylinder(c, s0, s1, 32, 16, amb2)
    lag0, lag1 = orbit_boundaries(c, s0, s1, amb2)
    return mesh, lag0, lag1


@pytest.fixture(scope="session")
def cap_small():
    """The n=2 disk fixture at test resolution (cached per session)."""
    return cap_fixture(Resolution(48, 24, 16))


@pytest.fixture(scope="session")
def cap_family(cap_small):
    from islag.transform import forward_transform
    levels = cap_levels(cap_small, 8)
    tcyls = forward_transform(cap_small.path, levels)
    return levels, tcyls


@pytest.fixture(scope="session")
def line_fix():
    return line_fixture(64, 32)
