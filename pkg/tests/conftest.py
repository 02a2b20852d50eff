"""
Shared fixtures: full-scale geometry, basis tensors and small inversion grids.
"""

import pytest

from apps.analytics.grid import build_grid
from apps.analytics.inversion import CarlemanFunctional, InversionConfig
from apps.core.basis import build_basis, coupling_tensors
from apps.core.geometry import CarlemanParams, ProblemGeometry


@pytest.fixture
def geometry():
    return ProblemGeometry(R=0.5, T=12.0, T_minus=4.0, source_count=100)


@pytest.fixture
def carleman(geometry):
    return CarlemanParams.from_geometry(geometry, sigma=2.5, h=0.1, lam=3.0, eta=1107.0 / 1280.0)


@pytest.fixture(scope="session")
def basis5():
    return build_basis(5, 0.5)


@pytest.fixture(scope="session")
def tensors5(basis5):
    return coupling_tensors(basis5)


@pytest.fixture(scope="session")
def basis2():
    return build_basis(2, 0.5)


@pytest.fixture(scope="session")
def tensors2(basis2):
    return coupling_tensors(basis2)


@pytest.fixture(scope="session")
def debug_grid():
    """7^3 spatial nodes (hx = R/2) by 5 time levels around T0."""
    return build_grid(0.5, 0.25, 0.2, 4.0, 12.0, penalty_order=2, t_window=(7.6, 8.4))


@pytest.fixture
def make_functional(geometry, carleman):
    """Factory for CarlemanFunctional on the full-scale geometry with InversionConfig overrides."""

    def factory(grid, tensors, offset=None, **config):
        return CarlemanFunctional(grid, tensors, geometry, carleman, InversionConfig(**config), offset)

    return factory
