"""End-to-end pipeline pieces shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from gapcast.data import FeatureStore
from gapcast.evaluation import ARBaseline, EvalReport, PersistenceBaseline, config_hash, evaluate
from gapcast.grid import Channel, CityCube, GridSpec, NormalizationStats, normalize, split_days
from gapcast.synthetic import SyntheticConfig, generate
from gapcast.temporal import ModelConfig, build_model
from gapcast.training import Checkpoint, History, TrainConfig, TrainResult, train, validation_split

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    cube: CityCube
    stats: NormalizationStats
    store: FeatureStore
    train_days: list[int]
    val_days: list[int]
    test_days: list[int]

    @property
    def grid(self) -> GridSpec:
        return self.store.grid

    def positions(self, which: str, history_days: int = 1) -> np.ndarray:
        days = {"train": self.train_days, "val": self.val_days, "test": self.test_days,
                "fit": self.train_days + self.val_days}[which]
        return self.store.positions(days, history_days)


def prepare(cube: CityCube, split=(5, 3), val_fraction: float = 0.2,
            stats: NormalizationStats | None = None) -> Prepared:
    """Normalize on the training days and index train/validation/test days.

    Test windows may reach back into training days for history; labels
    always come from their own split.
    """
    n_train = split_days(cube.n_days, tuple(split))
    if stats is None:
        _, stats = normalize(cube.days(0, n_train))
    norm, _ = normalize(cube, stats=stats)
    fit_days, val_days = validation_split(list(range(n_train)), val_fraction)
    return Prepared(cube, stats, FeatureStore(norm), fit_days, val_days,
                    list(range(n_train, cube.n_days)))


def fit(prep: Prepared, model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    model = build_model(model_config, prep.grid, dtype=train_config.dtype, seed=train_config.seed)
    d = model.days
    train_pos = prep.positions("train", d)
    if len(train_pos) == 0:
        raise ValueError(f"no training windows with {d} day(s) of history; "
                         f"lower history_days or add days")
    val_pos = prep.positions("val", d) if prep.val_days else None
    log.info("fitting %s on %d windows (%d validation)", model.kind, len(train_pos),
             0 if val_pos is None else len(val_pos))
    return train(model, prep.store, train_pos, train_config, val_pos)


def checkpoint_for(result: TrainResult, prep: Prepared, train_config: TrainConfig) -> Checkpoint:
    return Checkpoint(result.model, prep.grid, train_config, prep.stats, result.steps)


@dataclass
class BenchmarkSetup:
    """Synthetic benchmark: 10x6 grid, 3 clusters, noise 5% of amplitude, 8 days split 5:3."""

    grid: GridSpec = field(default_factory=lambda: GridSpec(rows=10, cols=6, history_days=3))
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(
        clusters=3, days=8, amplitude=4.0, noise_std=0.2))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_g=8, d_h=16))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=30, patience=10, precision="float32"))
    shift_minutes: float = 0.0


@dataclass
class BenchmarkRun:
    reports: dict[str, EvalReport]
    histories: dict[str, History]

    def __getitem__(self, name: str) -> EvalReport:
        return self.reports[name]


def run_benchmark(setup: BenchmarkSetup, seed: int, kinds=("arlp",),
                  baselines: bool = True) -> BenchmarkRun:
    """Generate, train every kind in ``kinds`` and evaluate on the shared test positions.

    All kinds are scored on positions that have the full multi-day history,
    so single- and multi-day models see identical test sets.
    """
    syn = SyntheticConfig(**{**setup.synthetic.__dict__, "seed": seed,
                             "daily_shift_minutes": setup.shift_minutes})
    cube, _ = generate(syn, setup.grid)
    prep = prepare(cube, setup.train.split, setup.train.val_fraction)
    test_pos = prep.positions("test", setup.grid.history_days)
    tcfg = TrainConfig(**{**setup.train.__dict__, "seed": seed})
    h = config_hash(setup.grid, syn, setup.model, tcfg)
    reports, histories = {}, {}
    if baselines:
        reports["persistence"] = evaluate(PersistenceBaseline(), prep.store, test_pos, prep.stats,
                                          seed=seed, config_hash=h)
        raw = prep.stats.denormalize_channel(prep.store.gap, Channel.GAP)
        ar = ARBaseline().fit(raw[prep.train_days + prep.val_days])
        reports[ar.name] = evaluate(ar, prep.store, test_pos, prep.stats, seed=seed, config_hash=h)
    for kind in kinds:
        mcfg = ModelConfig(**{**setup.model.__dict__, "kind": kind})
        result = fit(prep, mcfg, tcfg)
        reports[kind] = evaluate(result.model, prep.store, test_pos, prep.stats, seed=seed,
                                 config_hash=h)
        histories[kind] = result.history
    return BenchmarkRun(reports, histories)


def set_threads(n: int = 1) -> None:
    torch.set_num_threads(n)
