"""Error metrics, naive baselines, rolling evaluation and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gapcast.data import FeatureStore
from gapcast.grid import Channel, GridSpec, NormalizationStats

log = logging.getLogger(__name__)

ZERO_TARGET = 1e-8
METRICS_HEADER = ["model", "mae", "rmse", "mape_percent", "n", "excluded_zero_targets"]


class MetricError(ValueError):
    pass


def _pair(pred, y):
    pred, y = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    if pred.shape != y.shape:
        raise MetricError(f"{pred.size} predictions vs {y.size} labels")
    if pred.size == 0:
        raise MetricError("no samples")
    return pred, y


def mae(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.mean(np.abs(pred - y)))


def rmse(pred, y) -> float:
    pred, y = _pair(pred, y)
    err = np.abs(pred - y)
    top = err.max()
    if top == 0 or not np.isfinite(top):
        return float(top)
    # scaled so tiny errors do not underflow when squared
    return float(top * np.sqrt(np.mean((err / top) ** 2)))


def mape(pred, y) -> tuple[float, int]:
    """Mean absolute percentage error in percent, and how many near-zero labels were skipped."""
    pred, y = _pair(pred, y)
    keep = np.abs(y) >= ZERO_TARGET
    if not keep.any():
        raise MetricError("every label is zero; MAPE undefined")
    return float(100.0 * np.mean(np.abs(pred[keep] - y[keep]) / np.abs(y[keep]))), int((~keep).sum())


@dataclass
class EvalReport:
    model: str
    mae: float
    rmse: float
    mape: float  # percent
    n: int
    excluded_zero_targets: int
    seed: int | None = None
    config_hash: str = ""
    region_mae: np.ndarray | None = field(default=None, repr=False)
    normalized: "EvalReport | None" = field(default=None, repr=False)

    def row(self) -> list[str]:
        return [self.model, f"{self.mae:.10g}", f"{self.rmse:.10g}", f"{self.mape:.10g}",
                str(self.n), str(self.excluded_zero_targets)]


def report_from_predictions(name: str, pred, y, regions=None, n_regions: int | None = None,
                            **meta) -> EvalReport:
    p, t = _pair(pred, y)
    m, excl = mape(p, t)
    region_mae = None
    if regions is not None:
        n_regions = n_regions or int(np.max(regions)) + 1
        sums = np.bincount(regions, weights=np.abs(p - t), minlength=n_regions)
        counts = np.bincount(regions, minlength=n_regions)
        region_mae = sums / np.maximum(counts, 1)
    rep = EvalReport(name, mae(p, t), rmse(p, t), m, p.size, excl, region_mae=region_mae, **meta)
    if rep.rmse < rep.mae * (1 - 1e-12):
        raise MetricError(f"RMSE {rep.rmse} < MAE {rep.mae}")
    return rep


# ---------------------------------------------------------------------------
# baselines


class PersistenceBaseline:
    name = "persistence"

    def predict(self, store: FeatureStore, pos: np.ndarray) -> np.ndarray:
        return store.last_values(pos)


def persistence_baseline(window) -> float:
    return float(np.asarray(window)[-1])


def fit_ar(series: list[np.ndarray], order: int, difference: bool = False,
           ridge: float = 1e-6) -> np.ndarray:
    """Least-squares AR(order) coefficients (lag 1 first), no intercept.

    ``series`` is a list of contiguous segments; lags never cross segments.
    Singular normal equations fall back to ridge regression.
    """
    if order == 0:
        return np.zeros(0)
    rows, targets = [], []
    for s in series:
        x = np.diff(s) if difference else np.asarray(s, dtype=np.float64)
        if len(x) < order + 1:
            continue
        # row for time t holds x[t-1], ..., x[t-order]
        lagged = np.lib.stride_tricks.sliding_window_view(x[:-1], order)[:, ::-1]
        rows.append(lagged)
        targets.append(x[order:])
    if not rows or sum(len(t) for t in targets) < 1:
        raise MetricError(f"series too short for AR({order})")
    X, y = np.concatenate(rows), np.concatenate(targets)
    gram, rhs = X.T @ X, X.T @ y
    if np.linalg.matrix_rank(gram) < order or np.linalg.cond(gram) > 1e12:
        log.warning("AR(%d) normal equations singular; ridge fallback (lambda=%g)", order, ridge)
        gram = gram + ridge * np.eye(order)
    return np.linalg.solve(gram, rhs)


def ar_predict(coef: np.ndarray, window, difference: bool = False) -> float:
    w = np.asarray(window, dtype=np.float64)
    p = len(coef)
    if difference:
        d = np.diff(w)
        step = float(coef @ d[::-1][:p]) if p else 0.0
        return float(w[-1] + step)
    return float(coef @ w[::-1][:p]) if p else 0.0


class ARBaseline:
    """Per-region AR(p) on raw gap values, optionally on first differences."""

    def __init__(self, order: int = 3, difference: bool = True):
        self.order = order
        self.difference = difference
        self.coef: np.ndarray | None = None

    @property
    def name(self) -> str:
        return f"ar{self.order}" + ("_diff" if self.difference else "")

    def fit(self, raw_gap: np.ndarray) -> "ARBaseline":
        """``raw_gap`` is ``(days, intervals, regions)``; each day is one segment."""
        n_regions = raw_gap.shape[-1]
        self.coef = np.stack([fit_ar(list(raw_gap[:, :, r]), self.order, self.difference)
                              for r in range(n_regions)])
        return self

    def predict_raw(self, raw_gap: np.ndarray, pos: np.ndarray, window: int) -> np.ndarray:
        out = np.empty(len(pos))
        for i, (d, e, r) in enumerate(pos):
            out[i] = ar_predict(self.coef[r], raw_gap[d, e - window + 1:e + 1, r], self.difference)
        return out


# ---------------------------------------------------------------------------
# evaluation


def config_hash(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def evaluate(predictor, store: FeatureStore, pos: np.ndarray, stats: NormalizationStats,
             name: str | None = None, normalized: bool = False, **meta) -> EvalReport:
    """Rolling one-step evaluation at every position, in denormalized gap units.

    ``predictor`` is a trained model (``GapModel``), a ``PersistenceBaseline``
    or a fitted ``ARBaseline``.
    """
    from gapcast.temporal import GapModel
    from gapcast.training import predict_positions

    if len(pos) == 0:
        raise MetricError("empty test set")
    y_norm = store.labels(pos)
    raw_gap = stats.denormalize_channel(store.gap, Channel.GAP)
    if isinstance(predictor, GapModel):
        p_norm = predict_positions(predictor, store, pos)
        p_raw = stats.denormalize_channel(p_norm, Channel.GAP)
        name = name or predictor.kind
    elif isinstance(predictor, ARBaseline):
        p_raw = predictor.predict_raw(raw_gap, pos, store.grid.window)
        p_norm = stats.normalize_channel(p_raw, Channel.GAP)
        name = name or predictor.name
    else:
        p_norm = predictor.predict(store, pos)
        p_raw = stats.denormalize_channel(p_norm, Channel.GAP)
        name = name or getattr(predictor, "name", type(predictor).__name__)
    y_raw = stats.denormalize_channel(y_norm, Channel.GAP)
    rep = report_from_predictions(name, p_raw, y_raw, pos[:, 2], store.grid.n_regions, **meta)
    if normalized:
        rep.normalized = report_from_predictions(name, p_norm, y_norm, **meta)
    return rep


# ---------------------------------------------------------------------------
# report files


def metrics_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def heatmap_image(values: np.ndarray, grid: GridSpec, cell_px: int = 16) -> np.ndarray:
    """RGBA image of per-region values, ``cell_px`` pixels per grid cell."""
    from matplotlib import colormaps

    z = np.asarray(values, dtype=np.float64).reshape(grid.rows, grid.cols)
    top = z.max()
    z = z / top if top > 0 else z
    img = colormaps["viridis"](np.kron(z, np.ones((cell_px, cell_px))))
    return (img * 255).round().astype(np.uint8)


def emit_report(reports: list[EvalReport], out_dir: str | Path, grid: GridSpec | None = None,
                loss_histories: dict[str, list[float]] | None = None) -> list[Path]:
    """Write metrics.csv, a per-region error heat map per model and loss curves."""
    if not reports:
        raise MetricError("nothing to report")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.csv"]
    written[0].write_text(metrics_csv(reports))
    normalized = [r.normalized for r in reports if r.normalized is not None]
    if normalized:
        written.append(out / "metrics_normalized.csv")
        written[-1].write_text(metrics_csv(normalized))
    for r in reports:
        if grid is not None and r.region_mae is not None:
            path = out / f"heatmap_{r.model}.png"
            plt.imsave(path, heatmap_image(r.region_mae, grid), metadata={"Software": None})
            written.append(path)
    for name, losses in (loss_histories or {}).items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(np.arange(1, len(losses) + 1), losses)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(name)
        fig.tight_layout()
        path = out / f"loss_{name}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
