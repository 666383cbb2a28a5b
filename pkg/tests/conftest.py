import numpy as np
import pytest
import torch

from gapcast.grid import GridSpec
from gapcast.synthetic import SyntheticConfig, generate

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(rows=4, cols=4, neighborhood=3, window=5, history_days=3)


@pytest.fixture(scope="session")
def small_cube(small_grid):
    cube, labels = generate(SyntheticConfig(days=4, seed=3), small_grid)
    return cube


def random_cube(grid, days=2, seed=0):
    """Arbitrary finite cube with a consistent gap channel."""
    from gapcast.grid import Channel, CityCube

    r = np.random.default_rng(seed)
    shape = (days, grid.intervals_per_day, grid.rows, grid.cols)
    channels = {ch: r.normal(size=shape) for ch in Channel if ch not in (Channel.GAP, Channel.WEATHER)}
    channels[Channel.WEATHER] = r.integers(0, 4, size=shape).astype(float)
    return CityCube.from_channels(channels, grid)
