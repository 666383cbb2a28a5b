"""Sample windows and batch assembly from a normalized cube."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from gapcast.grid import N_WEATHER, Channel, CityCube, ConfigError, GridSpec
from gapcast.semantic import SEMANTIC_CHANNELS, acf_batch

SPATIAL_CHANNELS = (Channel.SPEED, Channel.VOLUME, Channel.JOURNEY_UP, Channel.JOURNEY_DOWN,
                    Channel.GAP)


@dataclass(frozen=True)
class SampleWindow:
    region: int
    day: int
    end: int  # last input interval; the label sits at end + 1

    def intervals(self, window: int) -> range:
        return range(self.end - window + 1, self.end + 1)


def weather_onehot(codes: np.ndarray) -> np.ndarray:
    """``(...)`` integer codes -> ``(N_WEATHER, ...)`` one-hot planes."""
    codes = np.asarray(codes).astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= N_WEATHER):
        raise ValueError(f"weather codes must lie in [0, {N_WEATHER})")
    return (np.arange(N_WEATHER).reshape((-1,) + (1,) * codes.ndim) == codes).astype(np.float64)


class FeatureStore:
    """Precomputed model inputs for every (day, window end, region).

    ``cube`` must already be normalized. The store keeps zero-padded
    spatial planes, ACF vectors of the four semantic channels for each
    window, and gap windows of all regions.
    """

    def __init__(self, cube: CityCube, grid: GridSpec | None = None):
        self.cube = cube
        self.grid = grid or cube.grid
        g = self.grid
        if cube.n_intervals < g.window + 1:
            raise ConfigError("days are shorter than one window plus label")
        v = cube.values
        n_days, n_int = cube.n_days, cube.n_intervals
        planes = np.concatenate(
            [weather_onehot(v[Channel.WEATHER])] + [v[[int(c) for c in SPATIAL_CHANNELS]]], axis=0
        )  # (P, days, n_int, X, Y)
        r = g.neighborhood // 2
        padded = np.pad(planes, [(0, 0)] * 3 + [(r, r), (r, r)])
        self.patches = sliding_window_view(padded, (g.neighborhood, g.neighborhood), axis=(3, 4))
        # window start w covers intervals w .. w + T - 1
        self.n_windows = n_int - g.window + 1
        R = g.n_regions
        sem = v[[int(c) for c in SEMANTIC_CHANNELS]].reshape(4, n_days, n_int, R)
        sem_win = sliding_window_view(sem, g.window, axis=2)  # (4, days, nw, R, T)
        self.acf = np.ascontiguousarray(acf_batch(sem_win, g.acf_lags).transpose(1, 2, 0, 3, 4))
        gap = v[Channel.GAP].reshape(n_days, n_int, R)
        self.gap = gap
        self.gap_windows = np.ascontiguousarray(sliding_window_view(gap, g.window, axis=1))

    def positions(self, days, history_days: int = 1) -> np.ndarray:
        """All ``(day, end, region)`` triples on ``days`` with enough history and a label."""
        g = self.grid
        days = [d for d in days if d >= history_days - 1]
        ends = np.arange(g.window - 1, self.cube.n_intervals - 1)
        dd, ee, rr = np.meshgrid(np.asarray(days, dtype=np.int64), ends, np.arange(g.n_regions),
                                 indexing="ij")
        return np.stack([dd.ravel(), ee.ravel(), rr.ravel()], axis=1)

    def labels(self, pos: np.ndarray) -> np.ndarray:
        return self.gap[pos[:, 0], pos[:, 1] + 1, pos[:, 2]]

    def last_values(self, pos: np.ndarray) -> np.ndarray:
        return self.gap[pos[:, 0], pos[:, 1], pos[:, 2]]

    def batch(self, pos: np.ndarray, n_days: int = 1, dtype=torch.float64) -> dict:
        g = self.grid
        pos = np.asarray(pos, dtype=np.int64)
        day, end, region = pos[:, 0], pos[:, 1], pos[:, 2]
        if np.any(day < n_days - 1):
            raise ConfigError(f"positions need {n_days - 1} previous day(s) of history")
        start = end - g.window + 1
        dd = day[:, None] - np.arange(n_days - 1, -1, -1)[None, :]  # (B, D)
        tt = start[:, None, None] + np.arange(g.window)[None, None, :]  # (B, 1, T)
        row, col = np.divmod(region, g.cols)
        idx = (dd[:, :, None], tt, row[:, None, None], col[:, None, None])
        planes = self.patches[:, idx[0], idx[1], idx[2], idx[3]]  # (P, B, D, T, S, S)
        planes = np.moveaxis(planes, 0, 3)
        acf = self.acf[dd, start[:, None]]  # (B, D, 4, R, H+1)
        acf_k = acf[np.arange(len(pos)), :, :, region]  # (B, D, 4, H+1)
        sim = np.einsum("bdcrh,bdch->bdcr", acf, acf_k)
        gap = self.gap_windows[dd, start[:, None]]  # (B, D, R, T)
        as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
        return {
            "planes": as_t(planes),
            "sim": as_t(sim),
            "target": torch.as_tensor(region),
            "gap": as_t(gap),
            "y": as_t(self.labels(pos)),
        }


def iterate_batches(store: FeatureStore, pos: np.ndarray, batch_size: int, n_days: int = 1,
                    rng: np.random.Generator | None = None, dtype=torch.float64):
    order = np.arange(len(pos)) if rng is None else rng.permutation(len(pos))
    for i in range(0, len(order), batch_size):
        yield store.batch(pos[order[i:i + batch_size]], n_days, dtype)
