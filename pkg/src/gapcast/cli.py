"""Command line entry point: synth, ingest, train, eval, predict, gradcheck, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from gapcast.config import RunConfig, load_config
from gapcast.evaluation import ARBaseline, MetricError, PersistenceBaseline, config_hash, emit_report, evaluate
from gapcast.experiment import checkpoint_for, fit, prepare
from gapcast.grid import Channel, ConfigError, DataError, load_cube, region_index, save_cube
from gapcast.semantic import DegenerateTargetError
from gapcast.temporal import MODEL_KINDS, build_model, zero_parameters
from gapcast.training import (Checkpoint, CheckpointError, DivergenceError, TrainResult,
                              grad_check, load_checkpoint, save_checkpoint)

log = logging.getLogger("gapcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {path}")
    return p


def _writable(path: str | Path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise UsageError(f"output directory {p.parent} does not exist")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    from gapcast.synthetic import generate

    out, labels_path = _writable(args.out), _writable(args.labels)
    cube, labels = generate(cfg.synthetic, cfg.grid)
    save_cube(cube, out)
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_index", "cluster_id"])
        w.writerows((i, int(c)) for i, c in enumerate(labels))
    print(f"wrote {out} ({cube.n_days} days x {cube.n_intervals} intervals) and {labels_path}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    from gapcast.ingest import ingest, read_csvs

    grid = cfg.grid
    if args.interval_minutes is not None:
        grid = replace(grid, interval_minutes=args.interval_minutes)
    paths = [_existing(p) for p in (args.orders, args.trajectories, args.weather)]
    out = _writable(args.out)
    cube, ilog = ingest(*read_csvs(*paths), grid, days=args.days, origin=args.origin)
    save_cube(cube, out)
    skipped = ", ".join(f"{k}={v}" for k, v in sorted(ilog.skipped.items())) or "none"
    print(f"wrote {out} ({cube.n_days} days); skipped records: {skipped}")
    return EXIT_OK


def _cube_for(cfg: RunConfig, path: str):
    cube = load_cube(_existing(path))
    # the config owns model-side window settings; the cube owns the geometry
    grid = replace(cfg.grid, rows=cube.grid.rows, cols=cube.grid.cols,
                   interval_minutes=cube.grid.interval_minutes)
    cube.grid = grid
    return cube


def cmd_train(args, cfg: RunConfig) -> int:
    cube = _cube_for(cfg, args.cube)
    out = _writable(args.out)
    mcfg = replace(cfg.model, kind=args.model)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    prep = prepare(cube, tcfg.split, tcfg.val_fraction)
    if args.zero_init:
        model = zero_parameters(build_model(mcfg, prep.grid, seed=tcfg.seed))
        ckpt = Checkpoint(model, prep.grid, tcfg, prep.stats, 0)
        history = None
    else:
        result: TrainResult = fit(prep, mcfg, tcfg)
        ckpt, history = checkpoint_for(result, prep, tcfg), result.history
    save_checkpoint(ckpt, out)
    if history is not None:
        log_path = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mae"])
            for i, tr in enumerate(history.epoch_train):
                val = history.epoch_val_mae[i] if i < len(history.epoch_val_mae) else ""
                w.writerow([i + 1, f"{tr:.10g}", f"{val:.10g}" if val != "" else ""])
        print(f"wrote {out} after {ckpt.step} steps; loss log {log_path}")
    else:
        print(f"wrote zero-initialized {out}")
    return EXIT_OK


def dump_attention(model, batch, grid, out_dir: Path, prefix: str = "sample") -> int:
    """Write sd/ha/sa/fa grids (current day) for each sample in ``batch``."""
    if model.kind == "lstm":
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        sd, ha, sa, fa = model.semantic.attention(batch["sim"][:, -1], batch["target"])
    for i in range(len(batch["target"])):
        for name, arr in (("sd", sd), ("ha", ha), ("sa", sa), ("fa", fa)):
            np.savetxt(out_dir / f"{prefix}{i:04d}_{name}.csv",
                       arr[i].numpy().reshape(grid.rows, grid.cols), delimiter=",", fmt="%.10g")
    return len(batch["target"])


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint))
    cube = load_cube(_existing(args.cube))
    if (cube.grid.rows, cube.grid.cols) != (ckpt.grid.rows, ckpt.grid.cols):
        raise DataError(f"cube grid {cube.grid.rows}x{cube.grid.cols} does not match checkpoint")
    cube.grid = ckpt.grid
    out = Path(args.out)
    prep = prepare(cube, ckpt.train_config.split, ckpt.train_config.val_fraction, stats=ckpt.stats)
    test_pos = prep.positions("test", ckpt.model.days)
    meta = dict(seed=ckpt.train_config.seed, config_hash=config_hash(ckpt.grid, ckpt.model_config,
                                                                     ckpt.train_config))
    reports = [evaluate(ckpt.model, prep.store, test_pos, prep.stats, normalized=args.normalized, **meta)]
    if not args.no_baselines:
        reports.append(evaluate(PersistenceBaseline(), prep.store, test_pos, prep.stats,
                                normalized=args.normalized, **meta))
        raw = prep.stats.denormalize_channel(prep.store.gap, Channel.GAP)
        ar = ARBaseline().fit(raw[prep.train_days + prep.val_days])
        reports.append(evaluate(ar, prep.store, test_pos, prep.stats, normalized=args.normalized, **meta))
    emit_report(reports, out, ckpt.grid)
    if args.dump_attention:
        n = min(args.dump_limit, len(test_pos))
        batch = prep.store.batch(test_pos[:n], ckpt.model.days, ckpt.train_config.dtype)
        dump_attention(ckpt.model, batch, ckpt.grid,
                       Path(args.dump_attention))
    for r in reports:
        print(f"{r.model:12s} MAE {r.mae:.4f}  RMSE {r.rmse:.4f}  MAPE {r.mape:.2f}%  n={r.n}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint))
    cube = load_cube(_existing(args.cube))
    cube.grid = ckpt.grid
    grid = ckpt.grid
    try:
        region = region_index(args.row, args.col, grid) if args.region is None else args.region
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    if not 0 <= region < grid.n_regions:
        raise UsageError(f"region {region} outside [0, {grid.n_regions})")
    end = args.interval - 1
    if not grid.window - 1 <= end < cube.n_intervals - 1:
        raise UsageError(f"interval must lie in [{grid.window}, {cube.n_intervals - 1}]")
    if not ckpt.model.days - 1 <= args.day < cube.n_days:
        raise UsageError(f"day must lie in [{ckpt.model.days - 1}, {cube.n_days - 1}]")
    prep = prepare(cube, ckpt.train_config.split, ckpt.train_config.val_fraction, stats=ckpt.stats)
    batch = prep.store.batch(np.array([[args.day, end, region]]), ckpt.model.days,
                             ckpt.train_config.dtype)
    ckpt.model.eval()
    with torch.no_grad():
        y = float(ckpt.model(batch)[0])
    if args.raw:
        y = float(prep.stats.denormalize_channel(y, Channel.GAP))
    if args.dump_attention:
        dump_attention(ckpt.model, batch, grid, Path(args.dump_attention))
    print(repr(y))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from gapcast.synthetic import generate

    grid = replace(cfg.grid, rows=args.rows, cols=args.cols, neighborhood=args.neighborhood,
                   history_days=args.days, acf_lags=None)
    syn = replace(cfg.synthetic, days=max(args.days, 2), seed=args.seed)
    cube, _ = generate(syn, grid)
    prep = prepare(cube, (1, 1), 0.0)
    ok = True
    for kind in args.model:
        mcfg = replace(cfg.model, kind=kind, d_g=args.d_g, d_h=args.d_h)
        model = build_model(mcfg, grid, seed=args.seed)
        pos = prep.store.positions(range(cube.n_days), model.days)
        rng = np.random.default_rng(args.seed)
        batch = prep.store.batch(pos[rng.choice(len(pos), args.samples, replace=False)], model.days)
        report = grad_check(model, batch, args.epsilon, args.per_group, args.seed, args.tolerance)
        if args.details:
            print("\n".join(report.lines()))
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {kind}: max relative error {report.worst:.3e} (tolerance {args.tolerance:g})")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args, cfg: RunConfig) -> int:
    rows, header = [], None
    for path in args.metrics:
        with open(_existing(path), newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or (header is not None and head != header):
                raise DataError(f"{path}: unexpected metrics header {head}")
            header = head
            rows.extend(reader)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"merged {len(rows)} row(s) into {out / 'metrics.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    p = Parser(prog="gapcast", description="Supply-demand gap forecasting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="generate a synthetic cube and cluster labels")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="cube file to write")
    s.add_argument("--labels", required=True, help="CSV of region_index,cluster_id")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="bin orders/trajectories/weather CSVs into a cube")
    s.add_argument("--orders", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--weather", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--interval-minutes", type=int)
    s.add_argument("--days", type=int, help="horizon length in days (default: span of records)")
    s.add_argument("--origin", help="timestamp of day 0 midnight (default: first record's date)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a model on a cube")
    s.add_argument("--model", choices=MODEL_KINDS, default="arlp")
    s.add_argument("--cube", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint file to write")
    s.add_argument("--seed", type=int)
    s.add_argument("--loss-log", help="CSV of per-epoch losses (default: <out>.loss.csv)")
    s.add_argument("--zero-init", action="store_true", help="write an all-zero model without training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test days of a cube")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--normalized", action="store_true", help="also report normalized-unit metrics")
    s.add_argument("--no-baselines", action="store_true")
    s.add_argument("--dump-attention", metavar="DIR")
    s.add_argument("--dump-limit", type=int, default=16)
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict one region's gap at one interval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--region", type=int)
    s.add_argument("--row", type=int, default=0)
    s.add_argument("--col", type=int, default=0)
    s.add_argument("--day", type=int, required=True)
    s.add_argument("--interval", type=int, required=True, help="interval whose gap is predicted")
    s.add_argument("--raw", action="store_true", help="print in raw gap units instead of normalized")
    s.add_argument("--dump-attention", metavar="DIR")
    s.add_argument("--config")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check at tiny dimensions")
    s.add_argument("--config")
    s.add_argument("--model", nargs="+", choices=MODEL_KINDS, default=["arlp", "advanced"])
    s.add_argument("--rows", type=int, default=4)
    s.add_argument("--cols", type=int, default=4)
    s.add_argument("--neighborhood", type=int, default=3)
    s.add_argument("--days", type=int, default=3)
    s.add_argument("--d-g", type=int, default=4)
    s.add_argument("--d-h", type=int, default=4)
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--per-group", type=int, default=200)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--details", action="store_true", help="print one line per parameter group")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="merge metrics.csv files into one")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, DegenerateTargetError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
