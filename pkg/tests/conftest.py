import math

import numpy as np
import pytest

from isingcontrol.network import Intersection, Road, RoadNetwork, generate_lattice


def star_network(angles, length=100.0, signalized=True):
    """Hub 0 with one two-way spoke per approach angle (degrees from east)."""
    nodes = [Intersection(0, 0.0, 0.0, signalized)]
    roads = []
    for k, a in enumerate(angles, start=1):
        rad = math.radians(a)
        nodes.append(Intersection(k, length * math.cos(rad), length * math.sin(rad), False))
        roads.append(Road(k, 0, length))
        roads.append(Road(0, k, length))
    return RoadNetwork(tuple(nodes), tuple(roads))


@pytest.fixture(scope="session")
def lattice3():
    return generate_lattice(3, 3)


@pytest.fixture(scope="session")
def lattice5():
    return generate_lattice(5, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
