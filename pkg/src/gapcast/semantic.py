"""Semantic similarity attention over regions.

Each region's demand, supply and journey-distance windows are summarised
by autocorrelation vectors; dot products with the target region's vectors
give four similarity maps, a learned 1x1 weighting fuses them into a
similarity distance, and hard/sample attention on that distance picks and
weights regions whose gap series are summed into one semantic series.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from gapcast.grid import Channel

EPS = 1e-8
SEMANTIC_CHANNELS = (Channel.DEMAND, Channel.SUPPLY, Channel.JOURNEY_UP, Channel.JOURNEY_DOWN)


class DegenerateTargetError(ArithmeticError):
    """The target's similarity distance is too close to zero to divide by."""


def acf_vector(series, lags: int) -> np.ndarray:
    """Autocorrelation coefficients r_0..r_lags of a 1-D series.

    A constant series returns (1, 0, ..., 0).
    """
    x = np.asarray(series, dtype=np.float64)
    return acf_batch(x[None, :], lags)[0]


def acf_batch(series: np.ndarray, lags: int) -> np.ndarray:
    """ACF along the last axis for any leading batch shape -> ``(..., lags+1)``."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    if n < 3:
        raise ValueError("autocorrelation needs at least 3 points")
    if not 0 <= lags <= n - 2:
        raise ValueError(f"lags must lie in [0, {n - 2}], got {lags}")
    xc = x - x.mean(axis=-1, keepdims=True)
    denom = np.einsum("...t,...t->...", xc, xc)
    out = np.empty(x.shape[:-1] + (lags + 1,))
    for h in range(lags + 1):
        out[..., h] = np.einsum("...t,...t->...", xc[..., : n - h], xc[..., h:])
    # relative threshold so series that are constant up to rounding count as constant
    scale = np.einsum("...t,...t->...", x, x)
    const = denom <= 1e-24 * np.maximum(scale, 1.0)
    safe = np.where(const, 1.0, denom)
    out = out / safe[..., None]
    out[const] = 0.0
    out[const, 0] = 1.0
    return out


@dataclass
class SimilarityMaps:
    """Per-channel similarity of every region to ``target`` (shape ``(4, n_regions)``)."""

    maps: np.ndarray
    target: int

    @property
    def demand(self):
        return self.maps[0]

    @property
    def supply(self):
        return self.maps[1]

    @property
    def journey_up(self):
        return self.maps[2]

    @property
    def journey_down(self):
        return self.maps[3]


def similarity_maps(window: np.ndarray, target: int, lags: int) -> SimilarityMaps:
    """``window`` is ``(4, n_regions, T)`` holding demand, supply, Ju, Jd series."""
    acf = acf_batch(window, lags)  # (4, R, H+1)
    return SimilarityMaps(np.einsum("crh,ch->cr", acf, acf[:, target]), target)


@dataclass
class ChannelWeights:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def uniform(cls) -> "ChannelWeights":
        return cls(np.full(4, 0.25), 0.0)


def similarity_distance(maps, weights, bias=0.0):
    """Weighted sum of the four maps plus bias; works on numpy or torch inputs.

    ``maps`` is ``(..., 4, n_regions)`` and ``weights`` has length 4.
    """
    if isinstance(maps, SimilarityMaps):
        maps = maps.maps
    if isinstance(weights, ChannelWeights):
        weights, bias = weights.weights, weights.bias
    if not isinstance(maps, torch.Tensor):
        maps, weights = np.asarray(maps, dtype=np.float64), np.asarray(weights, dtype=np.float64)
    return (weights[..., :, None] * maps).sum(-2) + bias


def hard_attention(sd, target: int, beta: float = 0.9):
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    sd = np.asarray(sd)
    return (sd > beta * sd[target]).astype(np.float64)


def sample_attention(sd, target: int):
    sd = np.asarray(sd, dtype=np.float64)
    if abs(sd[target]) <= EPS:
        raise DegenerateTargetError(f"|sd_k| = {abs(sd[target]):.3g} <= {EPS}")
    return sd / sd[target]


def final_attention(ha, sa):
    return ha * sa


def synthesize(gap_window, fa, normalize: bool = False):
    """Semantic series s_j = sum_i fa_i * gap_i[j] for ``gap_window`` of shape (R, T)."""
    gap_window = np.asarray(gap_window, dtype=np.float64)
    fa = np.asarray(fa, dtype=np.float64)
    s = fa @ gap_window
    if normalize:
        total = fa.sum()
        s = s / total if abs(total) > EPS else s
    return s


@dataclass
class AttentionOutcome:
    sd: np.ndarray
    ha: np.ndarray
    sa: np.ndarray
    fa: np.ndarray
    beta: float


def attend(maps: SimilarityMaps, weights: ChannelWeights, beta: float = 0.9) -> AttentionOutcome:
    sd = similarity_distance(maps, weights)
    ha = hard_attention(sd, maps.target, beta)
    sa = sample_attention(sd, maps.target)
    return AttentionOutcome(sd, ha, sa, final_attention(ha, sa), beta)


class SemanticBlock(nn.Module):
    """Batched, differentiable semantic attention.

    Inputs per sample: similarity maps ``(4, R)``, the target index and the
    normalized gap window ``(R, T)``. The hard mask is computed without
    gradient. A target whose |sd_k| falls below ``EPS`` falls back to
    attending to itself only; the count is kept in ``degenerate_count``.
    """

    def __init__(self, beta: float = 0.9, normalize: bool = False):
        super().__init__()
        self.beta = beta
        self.normalize = normalize
        # 1x1 convolution over the four similarity channels
        self.weight = nn.Parameter(torch.full((4,), 0.25))
        self.bias = nn.Parameter(torch.zeros(()))
        self.degenerate_count = 0

    def attention(self, sim: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None):
        sd = similarity_distance(sim, self.weight, self.bias)  # (B, R)
        sd_k = sd.gather(1, target[:, None])  # (B, 1)
        bad = sd_k.abs() <= EPS
        if mask is None:
            with torch.no_grad():
                mask = (sd > self.beta * sd_k).to(sd.dtype)
        sa = sd / torch.where(bad, torch.ones_like(sd_k), sd_k)
        fa = mask * sa
        if bad.any():
            self.degenerate_count += int(bad.sum())
            onehot = torch.zeros_like(sd).scatter_(1, target[:, None], 1.0)
            fa = torch.where(bad, onehot, fa)
        return sd, mask, sa, fa

    def forward(self, sim, target, gap_window, mask=None):
        sd, mask, sa, fa = self.attention(sim, target, mask)
        s = torch.einsum("br,brt->bt", fa, gap_window)
        if self.normalize:
            total = fa.sum(dim=1, keepdim=True)
            s = s / torch.where(total.abs() > EPS, total, torch.ones_like(total))
        return s, mask
