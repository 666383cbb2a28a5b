"""Gridded city data model: channels, cubes, patches, normalization, splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

CUBE_MAGIC = b"ARLPCUBE1"


class ConfigError(ValueError):
    """Invalid grid, split, or generator configuration."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Channel(IntEnum):
    WEATHER = 0
    SPEED = 1
    VOLUME = 2
    JOURNEY_UP = 3
    JOURNEY_DOWN = 4
    DEMAND = 5
    SUPPLY = 6
    GAP = 7


N_CHANNELS = len(Channel)
WEATHER_CODES = {"sunny": 0, "rainy": 1, "cloudy": 2, "other": 3}
N_WEATHER = len(WEATHER_CODES)


@dataclass(frozen=True)
class GridSpec:
    """City discretization plus window and history sizes.

    Defaults follow the reference experimental setup: a 20 x 10 grid of
    30-minute intervals, a 5-interval (2.5 h) input window, 5 x 5
    neighborhoods and 5 days of history.
    """

    rows: int = 20
    cols: int = 10
    interval_minutes: int = 30
    neighborhood: int = 5
    window: int = 5
    history_days: int = 5
    acf_lags: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ConfigError(f"neighborhood must be odd and >= 1, got {self.neighborhood}")
        if self.window < 3:
            raise ConfigError("window needs at least 3 intervals for autocorrelation")
        if self.history_days < 1:
            raise ConfigError("history_days must be >= 1")
        if self.interval_minutes < 1 or 1440 % self.interval_minutes:
            raise ConfigError(f"interval_minutes must divide a day, got {self.interval_minutes}")
        if self.acf_lags is None:
            object.__setattr__(self, "acf_lags", min(4, self.window - 2))
        if not 0 <= self.acf_lags <= self.window - 2:
            raise ConfigError(f"acf_lags must lie in [0, window-2], got {self.acf_lags}")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def intervals_per_day(self) -> int:
        return 1440 // self.interval_minutes

    def with_(self, **changes) -> "GridSpec":
        return replace(self, **changes)


def region_index(row: int, col: int, grid: GridSpec) -> int:
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise IndexError(f"cell ({row}, {col}) outside {grid.rows}x{grid.cols} grid")
    return row * grid.cols + col


def region_coords(index: int, grid: GridSpec) -> tuple[int, int]:
    if not 0 <= index < grid.n_regions:
        raise IndexError(f"region {index} outside [0, {grid.n_regions})")
    return divmod(index, grid.cols)


@dataclass
class CityCube:
    """Dense signal store indexed ``[channel, day, interval, row, col]``."""

    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 5:
            raise DataError(f"cube values must be 5-D, got shape {self.values.shape}")
        c, _, _, x, y = self.values.shape
        if c != N_CHANNELS or (x, y) != (self.grid.rows, self.grid.cols):
            raise DataError(
                f"cube shape {self.values.shape} does not match "
                f"{N_CHANNELS} channels on a {self.grid.rows}x{self.grid.cols} grid"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("cube contains non-finite values")

    @property
    def n_days(self) -> int:
        return self.values.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.values.shape[2]

    def channel(self, ch: Channel) -> np.ndarray:
        return self.values[int(ch)]

    def days(self, start: int, stop: int) -> "CityCube":
        return CityCube(self.values[:, start:stop].copy(), self.grid)

    def copy(self) -> "CityCube":
        return CityCube(self.values.copy(), self.grid)

    @classmethod
    def from_channels(cls, channels: dict[Channel, np.ndarray], grid: GridSpec) -> "CityCube":
        """Assemble a cube; the gap channel is always recomputed as demand minus supply."""
        shape = np.shape(channels[Channel.DEMAND])
        values = np.zeros((N_CHANNELS, *shape))
        for ch, arr in channels.items():
            values[int(ch)] = arr
        values[Channel.GAP] = values[Channel.DEMAND] - values[Channel.SUPPLY]
        return cls(values, grid)


def extract_patch(
    cube: CityCube, channel: Channel | int, day: int, interval: int, center: int, size: int
) -> np.ndarray:
    """S x S neighborhood around ``center``; cells outside the grid are 0."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {size}")
    if not 0 <= int(channel) < N_CHANNELS:
        raise IndexError(f"channel {channel} out of range")
    if not 0 <= day < cube.n_days:
        raise IndexError(f"day {day} out of range [0, {cube.n_days})")
    if not 0 <= interval < cube.n_intervals:
        raise IndexError(f"interval {interval} out of range [0, {cube.n_intervals})")
    row, col = region_coords(center, cube.grid)
    r = size // 2
    plane = np.pad(cube.values[int(channel), day, interval], r)
    return plane[row : row + size, col : col + size].copy()


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    categorical: tuple[int, ...] = (int(Channel.WEATHER),)

    def scale(self) -> np.ndarray:
        span = self.maximum - self.minimum
        return np.where(span > 0, span, 1.0)

    def denormalize_channel(self, values, ch: Channel | int):
        ch = int(ch)
        if ch in self.categorical:
            return values
        span = self.maximum[ch] - self.minimum[ch]
        return np.asarray(values) * span + self.minimum[ch]

    def normalize_channel(self, values, ch: Channel | int):
        ch = int(ch)
        if ch in self.categorical:
            return values
        return (np.asarray(values) - self.minimum[ch]) / self.scale()[ch]


def fit_normalization(train: CityCube) -> NormalizationStats:
    if train.values.size == 0:
        raise ConfigError("normalization needs a non-empty training slice")
    flat = train.values.reshape(N_CHANNELS, -1)
    return NormalizationStats(flat.min(axis=1), flat.max(axis=1))


def normalize(cube: CityCube, stats_source: CityCube | None = None,
              stats: NormalizationStats | None = None) -> tuple[CityCube, NormalizationStats]:
    """Per-channel min-max scaling fitted on ``stats_source`` (train slice).

    Values outside the training range are left unclipped. Constant channels
    map to 0 and the weather channel keeps its category codes.
    """
    if stats is None:
        stats = fit_normalization(stats_source if stats_source is not None else cube)
    out = cube.values.copy()
    shape = (N_CHANNELS,) + (1,) * (out.ndim - 1)
    out = (out - stats.minimum.reshape(shape)) / stats.scale().reshape(shape)
    for ch in stats.categorical:
        out[ch] = cube.values[ch]
    return CityCube(out, cube.grid), stats


def denormalize(cube: CityCube, stats: NormalizationStats) -> CityCube:
    shape = (N_CHANNELS,) + (1,) * (cube.values.ndim - 1)
    span = (stats.maximum - stats.minimum).reshape(shape)
    out = cube.values * span + stats.minimum.reshape(shape)
    for ch in stats.categorical:
        out[ch] = cube.values[ch]
    return CityCube(out, cube.grid)


def split_days(n_days: int, ratio: tuple[int, int] = (5, 3)) -> int:
    """Number of leading days that go to training under ``ratio``."""
    a, b = ratio
    if a <= 0 or b <= 0:
        raise ConfigError(f"split ratio {a}:{b} leaves one side empty")
    n_train = round(n_days * a / (a + b))
    if n_train < 1 or n_train >= n_days:
        raise ConfigError(f"{n_days} days cannot be split {a}:{b}")
    return n_train


def split_by_time(cube: CityCube, ratio: tuple[int, int] = (5, 3)) -> tuple[CityCube, CityCube]:
    """Chronological split on whole days; every test day follows every train day."""
    if cube.n_intervals < cube.grid.window + 1:
        raise ConfigError(
            f"a day of {cube.n_intervals} intervals cannot hold a window of "
            f"{cube.grid.window} plus a label"
        )
    n_train = split_days(cube.n_days, ratio)
    return cube.days(0, n_train), cube.days(n_train, cube.n_days)


# ---------------------------------------------------------------------------
# serialization

_HEADER_FIELDS = ("rows", "cols", "interval_minutes", "neighborhood", "window",
                  "history_days", "acf_lags")
_HEADER = struct.Struct("<" + "q" * (len(_HEADER_FIELDS) + 3))


def cube_to_bytes(cube: CityCube) -> bytes:
    g = cube.grid
    head = _HEADER.pack(*(getattr(g, f) for f in _HEADER_FIELDS),
                        N_CHANNELS, cube.n_days, cube.n_intervals)
    return CUBE_MAGIC + head + cube.values.astype("<f8").tobytes(order="C")


def cube_from_bytes(blob: bytes) -> CityCube:
    if not blob.startswith(CUBE_MAGIC):
        raise DataError("not a cube file (bad magic)")
    off = len(CUBE_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise DataError("cube header truncated")
    fields = _HEADER.unpack_from(blob, off)
    grid = GridSpec(**dict(zip(_HEADER_FIELDS, fields)))
    n_ch, n_days, n_int = fields[len(_HEADER_FIELDS):]
    if n_ch != N_CHANNELS:
        raise DataError(f"cube has {n_ch} channels, expected {N_CHANNELS}")
    shape = (n_ch, n_days, n_int, grid.rows, grid.cols)
    body = blob[off + _HEADER.size:]
    if len(body) != 8 * int(np.prod(shape)):
        raise DataError(f"cube body has {len(body)} bytes, expected {8 * int(np.prod(shape))}")
    values = np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
    return CityCube(values, grid)


def save_cube(cube: CityCube, path: str | Path) -> None:
    Path(path).write_bytes(cube_to_bytes(cube))


def load_cube(path: str | Path) -> CityCube:
    return cube_from_bytes(Path(path).read_bytes())
