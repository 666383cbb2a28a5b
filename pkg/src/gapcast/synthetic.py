"""Synthetic cities with planted semantic clusters.

Every region belongs to one cluster. A cluster's demand wavelet is a daily
sinusoid whose cycle count per day differs between clusters (the ACF is
blind to phase, so clusters must differ in frequency to be separable).
Supply is scaled demand lagged one interval; the remaining channels are
monotone transforms of demand. All noise is white Gaussian drawn from
numpy's PCG64 generator seeded by ``SyntheticConfig.seed``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gapcast.grid import N_WEATHER, Channel, CityCube, ConfigError, GridSpec


@dataclass
class SyntheticConfig:
    clusters: int = 3
    days: int = 8
    amplitude: float = 4.0
    base_level: float = 12.0
    noise_std: float = 0.2
    offset_scale: float = 0.1  # per-region level offset, as a fraction of amplitude
    supply_ratio: float = 0.8
    daily_shift_minutes: float = 0.0
    weather_persistence: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ConfigError("need at least one cluster")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.days < 1:
            raise ConfigError("need at least one day")


def cluster_wavelets(config: SyntheticConfig, rng) -> np.ndarray:
    """``(clusters, 3)`` rows of (amplitude, phase, cycles per day)."""
    phase = rng.uniform(0, 2 * np.pi, config.clusters)
    cycles = np.arange(1, config.clusters + 1, dtype=np.float64)
    return np.stack([np.full(config.clusters, config.amplitude), phase, cycles], axis=1)


def _wave(params: np.ndarray, t: np.ndarray, intervals_per_day: int) -> np.ndarray:
    amp, phase, cycles = params[:, 0:1], params[:, 1:2], params[:, 2:3]
    return amp * np.sin(2 * np.pi * cycles * t[None, :] / intervals_per_day + phase)


def generate(config: SyntheticConfig, grid: GridSpec) -> tuple[CityCube, np.ndarray]:
    """Return the cube and the cluster id of every region (row-major)."""
    R = grid.n_regions
    if config.clusters > R:
        raise ConfigError(f"{config.clusters} clusters do not fit in {R} regions")
    rng = np.random.default_rng(config.seed)
    ipd = grid.intervals_per_day
    n_t = config.days * ipd

    labels = np.arange(R) % config.clusters
    rng.shuffle(labels)
    params = cluster_wavelets(config, rng)
    offsets = rng.uniform(-1, 1, R) * config.offset_scale * config.amplitude

    t = np.arange(-1, n_t)
    clean = config.base_level + _wave(params, t, ipd)[labels] + offsets[:, None]  # (R, n_t + 1)
    now, prev = clean[:, 1:], clean[:, :-1]

    def noise():
        return rng.normal(0.0, config.noise_std, (R, n_t))

    demand = now + noise()
    supply = config.supply_ratio * prev + noise()
    speed = 60.0 - 1.5 * now + noise()
    volume = 1.5 * now + noise()
    journey_up = 3.0 + 0.2 * now + noise()
    journey_down = 2.5 + 0.25 * now + noise()

    weather = np.empty(n_t, dtype=np.int64)
    weather[0] = 0
    for i in range(1, n_t):
        keep = rng.random() < config.weather_persistence
        weather[i] = weather[i - 1] if keep else rng.integers(N_WEATHER)

    def to_grid(series):  # (R, n_t) -> (days, ipd, X, Y)
        return series.T.reshape(config.days, ipd, grid.rows, grid.cols)

    channels = {
        Channel.WEATHER: np.broadcast_to(
            weather.reshape(config.days, ipd, 1, 1), (config.days, ipd, grid.rows, grid.cols)),
        Channel.SPEED: to_grid(speed),
        Channel.VOLUME: to_grid(volume),
        Channel.JOURNEY_UP: to_grid(journey_up),
        Channel.JOURNEY_DOWN: to_grid(journey_down),
        Channel.DEMAND: to_grid(demand),
        Channel.SUPPLY: to_grid(supply),
    }
    cube = CityCube.from_channels(channels, grid)
    if config.daily_shift_minutes:
        cube = inject_shift(cube, config.daily_shift_minutes)
    return cube, labels


def inject_shift(cube: CityCube, minutes_per_day: float) -> CityCube:
    """Rotate day k of every channel by k * shift intervals (rounded to whole intervals)."""
    slots = int(round(minutes_per_day / cube.grid.interval_minutes))
    out = cube.values.copy()
    if slots:
        for k in range(cube.n_days):
            out[:, k] = np.roll(cube.values[:, k], k * slots, axis=1)
    return CityCube(out, cube.grid)


def nearest_neighbor_labels(acf: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Label each region with that of the other region maximising the ACF dot product."""
    sim = acf @ acf.T
    np.fill_diagonal(sim, -np.inf)
    return labels[np.argmax(sim, axis=1)]
