import numpy as np
import pandas as pd
import pytest

from gapcast.grid import WEATHER_CODES, Channel, DataError, GridSpec
from gapcast.ingest import (Horizon, IngestLog, OrderRecord, TrajectoryPoint, WeatherRecord, bin_orders,
                            bin_trajectories, encode_weather, ingest, read_csvs)

GRID = GridSpec(rows=3, cols=2, interval_minutes=30)
T0 = pd.Timestamp("2024-03-01")
HZ = Horizon(T0, 1, GRID)


def ts(minutes):
    return T0 + pd.Timedelta(minutes=minutes)


def order(start, cell, dist=2.0, end=None, end_cell=None):
    return OrderRecord(ts(start), ts(end if end is not None else start + 10), cell, end_cell or cell, dist)


def test_order_counts_and_journey_means():
    orders = [order(5, (1, 1), 2.0), order(20, (1, 1), 4.0), order(40, (1, 1), 9.0),
              order(5, (0, 0), 1.0, end=65, end_cell=(2, 1))]
    ch = bin_orders(orders, HZ)
    d = ch[Channel.DEMAND]
    assert d[0, 0, 1, 1] == 2 and d[0, 1, 1, 1] == 1 and d[0, 0, 0, 0] == 1
    assert d.sum() == len(orders)
    assert ch[Channel.JOURNEY_UP][0, 0, 1, 1] == 3.0
    assert ch[Channel.JOURNEY_DOWN][0, 2, 2, 1] == 1.0
    assert ch[Channel.JOURNEY_UP][0, 3, 2, 1] == 0.0


def test_out_of_grid_orders_skipped_and_logged(caplog):
    log = IngestLog()
    ch = bin_orders([order(5, (7, 0)), order(5, (0, 0)), order(60 * 25, (0, 0))], HZ, log)
    assert ch[Channel.DEMAND].sum() == 1
    assert log.skipped["order-start"] == 2
    assert "skipped" in caplog.text


def test_negative_distance_rejected():
    with pytest.raises(DataError):
        bin_orders([order(5, (0, 0), -1.0)], HZ)


def test_trajectories_mean_speed_and_distinct_vehicles():
    pts = [TrajectoryPoint("a", (0, 1), 30.0, ts(1), True),
           TrajectoryPoint("a", (0, 1), 50.0, ts(9), True),
           TrajectoryPoint("b", (0, 1), 10.0, ts(12), False),
           TrajectoryPoint("c", (0, 1), 20.0, ts(40), True)]
    ch = bin_trajectories(pts, HZ)
    assert ch[Channel.SPEED][0, 0, 0, 1] == 30.0
    assert ch[Channel.VOLUME][0, 0, 0, 1] == 2
    assert ch[Channel.SUPPLY][0, 0, 0, 1] == 1
    assert ch[Channel.SUPPLY][0, 1, 0, 1] == 1
    assert ch[Channel.SPEED][0, 2].sum() == 0


def test_weather_forward_fill_and_last_wins():
    recs = [WeatherRecord(ts(0), "Sunny"), WeatherRecord(ts(10), "rainy"),
            WeatherRecord(ts(95), "snow")]
    w = encode_weather(recs, HZ)
    assert w.shape == (1, 48, 3, 2)
    assert w[0, 0, 0, 0] == WEATHER_CODES["rainy"]
    assert w[0, 1, 2, 1] == WEATHER_CODES["rainy"]
    assert np.all(w[0, 3:] == WEATHER_CODES["other"])


def test_weather_missing_first_interval():
    with pytest.raises(DataError):
        encode_weather([WeatherRecord(ts(45), "sunny")], HZ)


def _frames():
    rng = np.random.default_rng(0)
    n = 200
    start = [ts(m) for m in rng.integers(0, 2 * 1440, n)]
    orders = pd.DataFrame({
        "start_time": start, "end_time": [s + pd.Timedelta(minutes=15) for s in start],
        "start_row": rng.integers(0, 3, n), "start_col": rng.integers(0, 2, n),
        "end_row": rng.integers(0, 3, n), "end_col": rng.integers(0, 2, n),
        "distance_km": rng.uniform(0.5, 9, n), "served": True})
    traj = pd.DataFrame({
        "vehicle_id": rng.integers(0, 20, n).astype(str), "time": [ts(m) for m in rng.integers(0, 2880, n)],
        "row": rng.integers(0, 3, n), "col": rng.integers(0, 2, n),
        "speed_kmh": rng.uniform(0, 60, n), "available": rng.random(n) < 0.5})
    weather = pd.DataFrame({"time": [ts(0), ts(700)], "condition": ["cloudy", "rainy"]})
    return orders, traj, weather


def test_ingest_builds_consistent_cube():
    o, t, w = _frames()
    cube, log = ingest(o, t, w, GRID)
    assert cube.n_days == 2
    assert cube.values[Channel.DEMAND].sum() == len(o)
    np.testing.assert_array_equal(cube.values[Channel.GAP],
                                  cube.values[Channel.DEMAND] - cube.values[Channel.SUPPLY])
    again, _ = ingest(o, t, w, GRID)
    assert again.values.tobytes() == cube.values.tobytes()


def test_read_csvs_round_trip(tmp_path):
    o, t, w = _frames()
    for name, frame in (("o", o), ("t", t), ("w", w)):
        frame.to_csv(tmp_path / f"{name}.csv", index=False)
    ro, rt, rw = read_csvs(tmp_path / "o.csv", tmp_path / "t.csv", tmp_path / "w.csv")
    a, _ = ingest(o, t, w, GRID)
    b, _ = ingest(ro, rt, rw, GRID)
    assert np.array_equal(a.values, b.values)


def test_read_csvs_missing_column(tmp_path):
    o, t, w = _frames()
    o.drop(columns=["distance_km"]).to_csv(tmp_path / "o.csv", index=False)
    t.to_csv(tmp_path / "t.csv", index=False)
    w.to_csv(tmp_path / "w.csv", index=False)
    with pytest.raises(DataError):
        read_csvs(tmp_path / "o.csv", tmp_path / "t.csv", tmp_path / "w.csv")
