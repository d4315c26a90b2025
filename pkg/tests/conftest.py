import numpy as np
import pytest

from vpbmix.collision import CollisionKernel
from vpbmix.kinetic_core import FluidState, SpeciesPair, VelocityGrid

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def sp() -> SpeciesPair:
    return SpeciesPair()


@pytest.fixture(scope="session")
def vg5() -> VelocityGrid:
    return VelocityGrid(4.0, 5)


@pytest.fixture(scope="session")
def vg7() -> VelocityGrid:
    return VelocityGrid(4.5, 7)


@pytest.fixture(scope="session")
def hard_spheres() -> CollisionKernel:
    return CollisionKernel()


@pytest.fixture
def state() -> FluidState:
    return FluidState(1.0, 0.8, [0.2, -0.1, 0.05], 1.1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split()[0].rstrip(":"))):
            terminalreporter.write_line(line)
