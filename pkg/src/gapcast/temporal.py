"""Sequence encoders, day attention and prediction heads.

Three model kinds share one per-day encoder:

``arlp``      current-day window only; head sees h_T.
``advanced``  D aligned daily windows through a shared encoder, content
              attention over days, head sees [h_{T,D}; h^L].
``lstm``      ablation: the target's own gap series through the LSTM, no
              semantic or spatial block.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from gapcast.semantic import EPS, SemanticBlock
from gapcast.spatial import ContractError, SpatialBlock

log = logging.getLogger(__name__)

MODEL_KINDS = ("arlp", "advanced", "lstm")


@dataclass
class ModelConfig:
    kind: str = "arlp"
    d_g: int = 32
    d_h: int = 64
    beta: float = 0.9
    residual_layers: int = 4
    head_layers: int = 3
    normalize_semantic: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.head_layers < 1:
            raise ValueError("head needs at least one layer")


def build_feature_sequence(g: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Concatenate spatial features ``(..., T, d)`` with semantic series ``(..., T)``."""
    if g.shape[:-1] != s.shape:
        raise ContractError(f"spatial sequence {tuple(g.shape)} and semantic series "
                            f"{tuple(s.shape)} differ in length")
    return torch.cat([g, s[..., None]], dim=-1)


def lstm_encode(seq: torch.Tensor, lstm: nn.LSTM) -> torch.Tensor:
    """Final hidden state of a batch-first LSTM run from zero state."""
    if seq.dim() == 2:
        return lstm(seq[None])[0][0, -1]
    return lstm(seq)[0][:, -1]


def day_attention(hidden: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Content attention of each day's state against the current day's.

    ``hidden`` is ``(..., D, d_h)`` with the current day last. Returns the
    weights and the number of rows that hit the near-zero denominator and
    fell back to uniform weights.
    """
    dots = (hidden * hidden[..., -1:, :]).sum(-1)  # (..., D)
    denom = dots.sum(-1, keepdim=True)
    bad = denom.abs() <= EPS
    alpha = dots / torch.where(bad, torch.ones_like(denom), denom)
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("day attention denominator near zero in %d row(s); using uniform weights", n_bad)
        alpha = torch.where(bad, torch.full_like(alpha, 1.0 / hidden.shape[-2]), alpha)
    return alpha, n_bad


def long_term(alpha: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
    if alpha.shape != hidden.shape[:-1]:
        raise ContractError(f"alpha {tuple(alpha.shape)} does not match states {tuple(hidden.shape)}")
    return (alpha[..., None] * hidden).sum(-2)


class PredictHead(nn.Module):
    """Fully connected head; every layer including the scalar output is ReLU."""

    def __init__(self, d_in: int, d_hidden: int, n_layers: int = 3):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [1]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        # start the output unit inside the normalized label range so the final ReLU is live
        nn.init.constant_(self.layers[-1].bias, 0.5)

    def forward(self, x):
        for layer in self.layers:
            x = F.relu(layer(x))
        return x.squeeze(-1)


class GapModel(nn.Module):
    """One model of any kind; the batch layout is produced by ``gapcast.data``.

    Batch tensors (D = 1 for single-day kinds):
      planes   (B, D, T, P, S, S)  spatial neighborhoods per interval
      sim      (B, D, 4, R)        similarity maps against the target
      target   (B,)                target region index
      gap      (B, D, R, T)        normalized gap windows of all regions
    """

    def __init__(self, config: ModelConfig, neighborhood: int, window: int, history_days: int = 1):
        super().__init__()
        self.config = config
        self.neighborhood = neighborhood
        self.window = window
        self.days = history_days if config.kind == "advanced" else 1
        if config.kind == "advanced" and self.days < 2:
            raise ContractError("the multi-day model needs at least 2 days of history")
        if config.kind == "lstm":
            d_in = 1
        else:
            self.semantic = SemanticBlock(config.beta, config.normalize_semantic)
            self.spatial = SpatialBlock(neighborhood, config.d_g, config.residual_layers)
            d_in = self.spatial.out_dim + 1
        self.lstm = nn.LSTM(d_in, config.d_h, batch_first=True)
        head_in = 2 * config.d_h if config.kind == "advanced" else config.d_h
        self.head = PredictHead(head_in, config.d_h, config.head_layers)
        self.alpha_fallbacks = 0
        self.max_alpha_error = 0.0
        self.last_alpha: torch.Tensor | None = None

    @property
    def kind(self) -> str:
        return self.config.kind

    def day_features(self, planes, sim, target, gap, mask=None):
        """Per-step feature sequence ``(B, T, d)`` and the hard mask used."""
        if self.kind == "lstm":
            own = gap.gather(1, target[:, None, None].expand(-1, 1, gap.shape[-1]))[:, 0]
            return own[..., None], None
        s, mask = self.semantic(sim, target, gap, mask)
        b, t = planes.shape[:2]
        g = self.spatial(planes.flatten(0, 1)).view(b, t, -1)
        return build_feature_sequence(g, s), mask

    def encode_days(self, batch, masks=None):
        planes, sim, gap = batch["planes"], batch["sim"], batch["gap"]
        target = batch["target"]
        n_days = planes.shape[1]
        if n_days < self.days:
            raise ContractError(f"batch holds {n_days} day(s), model needs {self.days}")
        planes, sim, gap = planes[:, -self.days:], sim[:, -self.days:], gap[:, -self.days:]
        b, d = planes.shape[:2]
        mask_in = None if masks is None else masks.flatten(0, 1)
        seq, mask = self.day_features(
            planes.flatten(0, 1), sim.flatten(0, 1), target.repeat_interleave(d),
            gap.flatten(0, 1), mask_in,
        )
        h = lstm_encode(seq, self.lstm).view(b, d, -1)
        mask = None if mask is None else mask.view(b, d, -1)
        return h, mask

    def forward(self, batch, masks=None, return_masks: bool = False):
        h, mask = self.encode_days(batch, masks)
        if self.kind == "advanced":
            alpha, n_bad = day_attention(h)
            self.alpha_fallbacks += n_bad
            err = float((alpha.detach().sum(-1) - 1).abs().max())
            self.max_alpha_error = max(self.max_alpha_error, err)
            if err > max(1e-9, 1e3 * torch.finfo(alpha.dtype).eps):
                raise ArithmeticError(f"day attention weights sum to 1 +/- {err:.3g}")
            self.last_alpha = alpha.detach()
            head_in = torch.cat([h[:, -1], long_term(alpha, h)], dim=-1)
        else:
            head_in = h[:, -1]
        y = self.head(head_in)
        return (y, mask) if return_masks else y


def build_model(config: ModelConfig, grid, dtype=torch.float64, seed: int | None = None) -> GapModel:
    """Seeded construction; PyTorch's default layer init is uniform fan-in scaling."""
    if seed is not None:
        torch.manual_seed(seed)
    model = GapModel(config, grid.neighborhood, grid.window, grid.history_days)
    return model.to(dtype)


def zero_parameters(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model
