import numpy as np
import pytest

from regstack.grid import DiffeoMap, Grid, ScalarVolume


def gaussian_bump_displacement(grid: Grid, center, sigma, amplitude_vec) -> np.ndarray:
    """Analytic smooth displacement: amplitude * exp(-|x-c|^2 / (2 sigma^2))."""
    coords = grid.coordinate_arrays()
    d = grid.ndim
    c = np.asarray(center, dtype=float)[:d]
    a = np.asarray(amplitude_vec, dtype=float)[:d]
    r2 = ((coords - c) ** 2).sum(axis=-1)
    w = np.exp(-r2 / (2.0 * sigma**2))
    return w[..., None] * a


def bump_map(grid: Grid, center, sigma, amplitude_vec) -> DiffeoMap:
    u = gaussian_bump_displacement(grid, center, sigma, amplitude_vec)
    return DiffeoMap.from_displacements(grid, u)


def sphere_label(grid: Grid, center, radius) -> ScalarVolume:
    coords = grid.coordinate_arrays()
    c = np.asarray(center, dtype=float)[: grid.ndim]
    r2 = ((coords - c) ** 2).sum(axis=-1)
    return ScalarVolume(grid, (r2 <= radius**2).astype(np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
