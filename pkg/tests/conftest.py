import math

import numpy as np
import pytest

from coxmap import model as M
from coxmap.sim import GridSpec, simulate_dataset, tile_graph


def small_effects(spatial=True):
    effects = [
        M.EffectSpec("intercept", "intercept"),
        M.EffectSpec("z1", "linear"),
        M.EffectSpec("z2", "linear"),
        M.EffectSpec("z2_rw", "rw1", covariate="z2", n_levels=8),
    ]
    if spatial:
        effects.append(M.EffectSpec("spatial", "car_spatial"))
    return effects


@pytest.fixture(scope="session")
def small_dataset():
    """20x20 pixels in 16 tiles, with a CAR effect at precision 3."""
    grid = GridSpec(20, 20, 5)
    graph = tile_graph(grid)
    pixels, truth = simulate_dataset(grid, graph, small_effects(), theta=3.0, seed=11,
                                     fixed={"intercept": math.log(0.4 / 225)})
    return grid, graph, pixels, truth


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
