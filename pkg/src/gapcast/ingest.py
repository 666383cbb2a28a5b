"""Bin raw order, trajectory and weather records into a CityCube."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from gapcast.grid import WEATHER_CODES, Channel, CityCube, DataError, GridSpec

log = logging.getLogger(__name__)

ORDER_COLUMNS = ["start_time", "end_time", "start_row", "start_col", "end_row", "end_col",
                 "distance_km", "served"]
TRAJECTORY_COLUMNS = ["vehicle_id", "time", "row", "col", "speed_kmh", "available"]
WEATHER_COLUMNS = ["time", "condition"]


@dataclass
class OrderRecord:
    request_start_time: pd.Timestamp
    request_end_time: pd.Timestamp
    start_cell: tuple[int, int]
    end_cell: tuple[int, int]
    trip_distance: float
    served: bool = True


@dataclass
class TrajectoryPoint:
    vehicle_id: str
    cell: tuple[int, int]
    speed: float
    timestamp: pd.Timestamp
    available: bool


@dataclass
class WeatherRecord:
    timestamp: pd.Timestamp
    condition: str


@dataclass
class Horizon:
    """Day 0 starts at ``origin`` (midnight); the horizon spans ``days`` whole days."""

    origin: pd.Timestamp
    days: int
    grid: GridSpec

    def locate(self, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(day, interval, in_horizon) for an array of timestamps."""
        delta = (pd.to_datetime(pd.Series(times)) - self.origin).dt.total_seconds().to_numpy()
        minutes = np.floor(delta / 60.0).astype(np.int64)
        day = np.floor_divide(minutes, 1440)
        interval = np.mod(minutes, 1440) // self.grid.interval_minutes
        ok = (day >= 0) & (day < self.days)
        return day, interval, ok

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.days, self.grid.intervals_per_day, self.grid.rows, self.grid.cols)


@dataclass
class IngestLog:
    skipped: dict[str, int] = field(default_factory=dict)

    def skip(self, what: str, n: int) -> None:
        if n:
            log.warning("skipped %d %s record(s) outside the grid or horizon", n, what)
            self.skipped[what] = self.skipped.get(what, 0) + n


def _in_grid(rows, cols, grid: GridSpec) -> np.ndarray:
    rows, cols = np.asarray(rows), np.asarray(cols)
    return (rows >= 0) & (rows < grid.rows) & (cols >= 0) & (cols < grid.cols)


def _bool(col: pd.Series) -> np.ndarray:
    if col.dtype == bool:
        return col.to_numpy()
    return col.astype(str).str.strip().str.lower().isin(["1", "true", "t", "yes", "y"]).to_numpy()


def _records_frame(records, columns, convert) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        missing = [c for c in columns if c not in records.columns]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        return records
    return pd.DataFrame([convert(r) for r in records], columns=columns)


def _orders_frame(records) -> pd.DataFrame:
    return _records_frame(records, ORDER_COLUMNS, lambda r: [
        r.request_start_time, r.request_end_time, *r.start_cell, *r.end_cell, r.trip_distance,
        r.served])


def _trajectory_frame(points) -> pd.DataFrame:
    return _records_frame(points, TRAJECTORY_COLUMNS, lambda p: [
        p.vehicle_id, p.timestamp, *p.cell, p.speed, p.available])


def _weather_frame(records) -> pd.DataFrame:
    return _records_frame(records, WEATHER_COLUMNS, lambda w: [w.timestamp, w.condition])


def _mean_into(shape, idx, values):
    total, count = np.zeros(shape), np.zeros(shape)
    np.add.at(total, idx, values)
    np.add.at(count, idx, 1)
    return np.divide(total, count, out=np.zeros(shape), where=count > 0)


def bin_orders(records, horizon: Horizon, ingest_log: IngestLog | None = None) -> dict[Channel, np.ndarray]:
    """Demand counts and mean journey distances by start (up) and end (down) cell."""
    df = _orders_frame(records)
    ingest_log = ingest_log or IngestLog()
    grid, shape = horizon.grid, horizon.shape
    if (df["distance_km"].astype(float) < 0).any():
        raise DataError("negative trip distance")

    sd, st, s_ok = horizon.locate(df["start_time"])
    sr, sc = df["start_row"].to_numpy(int), df["start_col"].to_numpy(int)
    ok = s_ok & _in_grid(sr, sc, grid)
    ingest_log.skip("order-start", int((~ok).sum()))
    idx = (sd[ok], st[ok], sr[ok], sc[ok])
    demand = np.zeros(shape)
    np.add.at(demand, idx, 1)
    dist = df["distance_km"].to_numpy(float)
    journey_up = _mean_into(shape, idx, dist[ok])

    ed, et, e_ok = horizon.locate(df["end_time"])
    er, ec = df["end_row"].to_numpy(int), df["end_col"].to_numpy(int)
    ok = e_ok & _in_grid(er, ec, grid)
    ingest_log.skip("order-end", int((~ok).sum()))
    journey_down = _mean_into(shape, (ed[ok], et[ok], er[ok], ec[ok]), dist[ok])
    return {Channel.DEMAND: demand, Channel.JOURNEY_UP: journey_up, Channel.JOURNEY_DOWN: journey_down}


def bin_trajectories(points, horizon: Horizon, ingest_log: IngestLog | None = None) -> dict[Channel, np.ndarray]:
    """Mean speed, distinct vehicles seen, and distinct available vehicles per cell and interval."""
    df = _trajectory_frame(points)
    ingest_log = ingest_log or IngestLog()
    grid, shape = horizon.grid, horizon.shape
    speed = df["speed_kmh"].to_numpy(float)
    if (speed < 0).any():
        raise DataError("negative speed")
    d, t, in_h = horizon.locate(df["time"])
    r, c = df["row"].to_numpy(int), df["col"].to_numpy(int)
    ok = in_h & _in_grid(r, c, grid)
    ingest_log.skip("trajectory", int((~ok).sum()))
    idx = (d[ok], t[ok], r[ok], c[ok])
    mean_speed = _mean_into(shape, idx, speed[ok])

    vehicles = pd.factorize(df["vehicle_id"].astype(str), sort=True)[0][ok]
    cell = np.ravel_multi_index(idx, shape)
    available = _bool(df["available"])[ok]

    def distinct(mask):
        pairs = np.unique(np.stack([cell[mask], vehicles[mask]], axis=1), axis=0)
        return np.bincount(pairs[:, 0], minlength=int(np.prod(shape))).reshape(shape).astype(float) \
            if len(pairs) else np.zeros(shape)

    return {Channel.SPEED: mean_speed, Channel.VOLUME: distinct(np.ones(len(cell), bool)),
            Channel.SUPPLY: distinct(available)}


def encode_weather(records, horizon: Horizon) -> np.ndarray:
    """City-wide weather code per interval, forward-filled, broadcast to every cell."""
    df = _weather_frame(records)
    codes = df["condition"].astype(str).str.strip().str.lower().map(WEATHER_CODES).fillna(
        WEATHER_CODES["other"]).to_numpy(int)
    d, t, ok = horizon.locate(df["time"])
    ipd = horizon.grid.intervals_per_day
    slot = (d * ipd + t)[ok]
    codes = codes[ok]
    order = np.argsort(pd.to_datetime(df["time"]).to_numpy()[ok], kind="stable")
    per_slot = np.full(horizon.days * ipd, -1)
    per_slot[slot[order]] = codes[order]  # the last record inside a slot wins
    if per_slot[0] < 0:
        raise DataError("no weather record covers the first interval; cannot forward-fill")
    for i in range(1, len(per_slot)):
        if per_slot[i] < 0:
            per_slot[i] = per_slot[i - 1]
    grid = horizon.grid
    return np.broadcast_to(per_slot.reshape(horizon.days, ipd, 1, 1),
                           (horizon.days, ipd, grid.rows, grid.cols)).astype(float)


def horizon_for(frames: list[pd.Series], grid: GridSpec, days: int | None = None,
                origin=None) -> Horizon:
    times = pd.concat([pd.to_datetime(f) for f in frames if len(f)])
    if times.empty:
        raise DataError("no records to ingest")
    start = pd.Timestamp(origin) if origin is not None else times.min().normalize()
    if days is None:
        days = int((times.max() - start).days) + 1
    return Horizon(start, days, grid)


def ingest(orders, trajectories, weather, grid: GridSpec, days: int | None = None,
           origin=None) -> tuple[CityCube, IngestLog]:
    orders, trajectories, weather = _orders_frame(orders), _trajectory_frame(trajectories), \
        _weather_frame(weather)
    horizon = horizon_for([orders["start_time"], trajectories["time"]], grid, days, origin)
    ilog = IngestLog()
    channels = {Channel.WEATHER: encode_weather(weather, horizon)}
    channels.update(bin_orders(orders, horizon, ilog))
    channels.update(bin_trajectories(trajectories, horizon, ilog))
    return CityCube.from_channels(channels, grid), ilog


def read_csvs(orders: str | Path, trajectories: str | Path, weather: str | Path):
    try:
        o = pd.read_csv(orders, parse_dates=["start_time", "end_time"], float_precision="round_trip")
        tr = pd.read_csv(trajectories, parse_dates=["time"], dtype={"vehicle_id": str},
                         float_precision="round_trip")
        w = pd.read_csv(weather, parse_dates=["time"])
    except (ValueError, KeyError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot parse input CSV: {exc}") from exc
    for frame, cols, name in [(o, ORDER_COLUMNS, "orders"), (tr, TRAJECTORY_COLUMNS, "trajectories"),
                              (w, WEATHER_COLUMNS, "weather")]:
        missing = [c for c in cols if c not in frame.columns]
        if missing:
            raise DataError(f"{name} CSV lacks column(s): {', '.join(missing)}")
    return o, tr, w
