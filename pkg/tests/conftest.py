import numpy as np
import pytest

from varmion.geometry import build_output_lattice, build_unit_square_mesh, uniform_times
from varmion.ipcs import SolverConfig
from varmion.sensing import SensorLayout, generate_dataset


@pytest.fixture(scope="session")
def small_cavity_dataset():
    """Ten cheap cavity records (coarse mesh, large time step)."""
    mesh = build_unit_square_mesh(4)
    lattice = build_output_lattice(mesh, 5, 5, uniform_times(1.0, 4))
    layout = SensorLayout.compressed(mesh, lattice)
    return generate_dataset(mesh, 10, layout, lattice, SolverConfig(0.05, 1.0), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
