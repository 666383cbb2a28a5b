"""Loss, training loop, finite-difference gradient checks and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from gapcast.data import FeatureStore, iterate_batches
from gapcast.grid import GridSpec, NormalizationStats
from gapcast.temporal import GapModel, ModelConfig, build_model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ARLPCKPT1"
CKPT_VERSION = 1
OPTIMIZERS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    max_epochs: int = 50
    max_steps: int | None = None
    seed: int = 0
    optimizer: str = "adam"
    patience: int = 10
    val_fraction: float = 0.2
    split: tuple[int, int] = (5, 3)
    precision: str = "float64"

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        self.split = tuple(self.split)


def sse_loss(pred, target):
    """Sum (not mean) of squared errors over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != label shape {tuple(target.shape)}")
    return ((pred - target) ** 2).sum()


@dataclass
class History:
    step_loss: list[float] = field(default_factory=list)
    epoch_train: list[float] = field(default_factory=list)  # mean squared error per sample
    epoch_val_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class TrainResult:
    model: GapModel
    history: History
    steps: int


def predict_positions(model: GapModel, store: FeatureStore, pos: np.ndarray,
                      batch_size: int = 256) -> np.ndarray:
    """Normalized-space predictions for every position, in order."""
    out = []
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for b in iterate_batches(store, pos, batch_size, model.days, dtype=dtype):
            out.append(model(b).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def train(model: GapModel, store: FeatureStore, train_pos: np.ndarray, config: TrainConfig,
          val_pos: np.ndarray | None = None) -> TrainResult:
    """Mini-batch minimisation of the SSE loss.

    With ``config.max_steps`` set the loop stops after that many optimizer
    steps (cycling over epochs as needed); otherwise it runs up to
    ``max_epochs`` with early stopping on validation MAE when ``val_pos`` is
    given, restoring the best parameters.
    """
    if len(train_pos) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    opt = OPTIMIZERS[config.optimizer](model.parameters(), lr=config.learning_rate)
    hist = History()
    best, best_state, bad_epochs, steps = np.inf, None, 0, 0
    epoch = 0
    while True:
        model.train()
        total, n = 0.0, 0
        for b in iterate_batches(store, train_pos, config.batch_size, model.days, rng, dtype):
            loss = sse_loss(model(b), b["y"])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            hist.step_loss.append(loss.item())
            total += loss.item()
            n += len(b["y"])
            if config.max_steps is not None and steps >= config.max_steps:
                break
        hist.epoch_train.append(total / max(n, 1))
        epoch += 1
        if config.max_steps is not None:
            if steps >= config.max_steps:
                break
            continue
        if val_pos is not None and len(val_pos):
            mae = float(np.mean(np.abs(predict_positions(model, store, val_pos) - store.labels(val_pos))))
            hist.epoch_val_mae.append(mae)
            log.info("epoch %d train_mse %.5f val_mae %.5f", epoch, hist.epoch_train[-1], mae)
            if mae < best:
                best, bad_epochs, hist.best_epoch = mae, 0, epoch - 1
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
        if epoch >= config.max_epochs:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, hist, steps)


def validation_split(train_days: list[int], fraction: float) -> tuple[list[int], list[int]]:
    """Hold out the last ``fraction`` of training days (at least one if fraction > 0)."""
    n_val = int(round(len(train_days) * fraction))
    if fraction > 0:
        n_val = max(n_val, 1)
    n_val = min(n_val, len(train_days) - 1)
    return train_days[: len(train_days) - n_val], train_days[len(train_days) - n_val:]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    nonzero: dict[str, int]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self) -> list[str]:
        return [f"{name:48s} n={self.checked[name]:4d} nonzero={self.nonzero[name]:4d} max_rel={err:.3e}"
                for name, err in self.max_rel_error.items()]


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(model: GapModel, batch: dict, epsilon: float = 1e-5, per_group: int | None = 200,
               seed: int = 0, tolerance: float = 1e-4,
               corrupt: dict[str, float] | None = None) -> GradCheckReport:
    """Compare autograd gradients of the SSE loss with central differences.

    Each named parameter is one group; groups larger than ``per_group``
    are checked on a random subsample. The hard attention mask from the
    unperturbed pass is held fixed, matching the constant-mask gradient.
    ``corrupt`` scales chosen analytic gradients (detector fault injection).
    """
    for p in model.parameters():
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need float64 parameters")
    rng = np.random.default_rng(seed)
    model.eval()
    model.zero_grad()
    pred, masks = model(batch, return_masks=True)
    sse_loss(pred, batch["y"]).backward()

    def loss_at() -> float:
        with torch.no_grad():
            return float(sse_loss(model(batch, masks=masks), batch["y"]))

    errors, counts, nonzero = {}, {}, {}
    for name, p in model.named_parameters():
        grad = p.grad.detach().clone().view(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        if corrupt and name in corrupt:
            grad = grad * corrupt[name]
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if per_group is not None and len(idx) > per_group:
            idx = np.sort(rng.choice(idx, per_group, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = loss_at()
            flat[i] = orig - epsilon
            down = loss_at()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * epsilon)
        errors[name] = float(relative_error(grad.numpy()[idx], numeric).max())
        counts[name] = len(idx)
        nonzero[name] = int(np.count_nonzero(np.abs(numeric) > 1e-12))
    model.zero_grad()
    return GradCheckReport(errors, counts, nonzero, tolerance)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: GapModel
    grid: GridSpec
    train_config: TrainConfig
    stats: NormalizationStats | None = None
    step: int = 0

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config


def _pack_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    arr = np.asarray(arr, dtype="<f8")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "kind": ckpt.model.kind,
        "model": asdict(ckpt.model.config),
        "grid": asdict(ckpt.grid),
        "train": asdict(ckpt.train_config),
        "step": ckpt.step,
        "has_stats": ckpt.stats is not None,
    }
    head = json.dumps(meta, sort_keys=True).encode()
    blocks = [(k, v.detach().cpu().numpy()) for k, v in ckpt.model.state_dict().items()]
    if ckpt.stats is not None:
        blocks += [("__norm__.minimum", ckpt.stats.minimum), ("__norm__.maximum", ckpt.stats.maximum)]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        _pack_block(buf, name, arr)
    return buf.getvalue()


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        off = len(CKPT_MAGIC)
        version, n_head = struct.unpack_from("<II", blob, off)
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        off += 8
        meta = json.loads(blob[off:off + n_head].decode())
        off += n_head
        (n_blocks,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays = {}
        for _ in range(n_blocks):
            (n_name,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n_name].decode()
            off += n_name
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = 8 * int(np.prod(shape, dtype=np.int64))
            if off + size > len(blob):
                raise CheckpointError(f"checkpoint truncated inside block {name!r}")
            arrays[name] = np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape).copy()
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint blocks")
    grid = GridSpec(**meta["grid"])
    train_config = TrainConfig(**meta["train"])
    # float32 weights are exact in the f8 blocks, so rebuilding at the
    # training precision gives bit-identical predictions
    model = build_model(ModelConfig(**meta["model"]), grid, dtype=train_config.dtype)
    state = {k: torch.from_numpy(v).to(train_config.dtype) for k, v in arrays.items()
             if not k.startswith("__norm__")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc
    stats = None
    if meta.get("has_stats"):
        stats = NormalizationStats(arrays["__norm__.minimum"], arrays["__norm__.maximum"])
    return Checkpoint(model, grid, train_config, stats, meta["step"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
