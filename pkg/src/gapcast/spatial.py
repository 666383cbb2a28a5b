"""Residual CNN encoders over S x S neighborhoods and paired fusion."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from gapcast.grid import N_WEATHER

# planes fed to the spatial block, in order: weather one-hot, then the five signals
SPATIAL_GROUPS = ("weather", "speed", "volume", "journey_up", "journey_down", "gap")
GROUP_PLANES = {"weather": N_WEATHER, "speed": 1, "volume": 1, "journey_up": 1,
                "journey_down": 1, "gap": 1}
N_PLANES = sum(GROUP_PLANES.values())


class ContractError(ValueError):
    """Input shape or dimension does not match a component's contract."""


class ResidualLayer(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x)))) + x


class ResidualEncoder(nn.Module):
    """Stack of residual 3x3 layers on one channel group, then a linear projection.

    The residual stack keeps the group's own plane count, so with every
    convolution zeroed the encoder reduces to the projection of the raw patch.
    """

    def __init__(self, in_planes: int, size: int, d_out: int = 32, n_layers: int = 4):
        super().__init__()
        self.in_planes = in_planes
        self.size = size
        self.layers = nn.ModuleList(ResidualLayer(in_planes) for _ in range(n_layers))
        self.proj = nn.Linear(in_planes * size * size, d_out)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        if patch.dim() == 2:
            patch = patch[None, None]
        elif patch.dim() == 3:
            patch = patch[None] if self.in_planes > 1 else patch[:, None]
        if patch.shape[-3:] != (self.in_planes, self.size, self.size):
            raise ContractError(
                f"expected patches of shape ({self.in_planes}, {self.size}, {self.size}), "
                f"got {tuple(patch.shape[-3:])}"
            )
        x = patch
        for layer in self.layers:
            x = layer(x)
        return self.proj(x.flatten(1))


def encode_channel(patch: torch.Tensor, encoder: ResidualEncoder) -> torch.Tensor:
    """Encode one patch (``(S, S)`` or ``(C, S, S)``) or a batch of them."""
    single = patch.dim() == 2 or (patch.dim() == 3 and encoder.in_planes > 1)
    out = encoder(patch)
    return out[0] if single else out


class PairFusion(nn.Module):
    """ReLU(W [a; b] + c) halving the concatenated dimension."""

    def __init__(self, d_in: int):
        super().__init__()
        self.d_in = d_in
        self.fc = nn.Linear(2 * d_in, d_in)

    def forward(self, a, b):
        if a.shape[-1] != self.d_in or b.shape[-1] != self.d_in:
            raise ContractError(f"fusion expects two {self.d_in}-vectors, got "
                                f"{a.shape[-1]} and {b.shape[-1]}")
        return F.relu(self.fc(torch.cat([a, b], dim=-1)))


def fuse_pairs(g_ts, g_tv, g_ju, g_jd, fuse_traffic: PairFusion, fuse_journey: PairFusion):
    return fuse_traffic(g_ts, g_tv), fuse_journey(g_ju, g_jd)


def spatial_representation(g_wea, reduced_tsv, reduced_jud, g_ds):
    return torch.cat([g_wea, reduced_tsv, reduced_jud, g_ds], dim=-1)


class SpatialBlock(nn.Module):
    """Maps ``(B, N_PLANES, S, S)`` neighborhoods to ``(B, 4 * d_g)`` representations."""

    def __init__(self, size: int, d_g: int = 32, n_layers: int = 4):
        super().__init__()
        self.size = size
        self.d_g = d_g
        self.encoders = nn.ModuleDict(
            {name: ResidualEncoder(GROUP_PLANES[name], size, d_g, n_layers) for name in SPATIAL_GROUPS}
        )
        self.fuse_traffic = PairFusion(d_g)
        self.fuse_journey = PairFusion(d_g)

    @property
    def out_dim(self) -> int:
        return 4 * self.d_g

    def _encode_scalar_groups(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """The five one-plane encoders run as a single grouped convolution per layer.

        Identical to calling each encoder on its own plane, just far fewer
        kernel launches.
        """
        names = SPATIAL_GROUPS[1:]
        encs = [self.encoders[n] for n in names]
        g = len(names)
        for i in range(len(encs[0].layers)):
            convs = [(e.layers[i].conv1, e.layers[i].conv2) for e in encs]
            w1 = torch.cat([c[0].weight for c in convs])
            b1 = torch.cat([c[0].bias for c in convs])
            w2 = torch.cat([c[1].weight for c in convs])
            b2 = torch.cat([c[1].bias for c in convs])
            h = F.relu(F.conv2d(x, w1, b1, padding=1, groups=g))
            x = F.relu(F.conv2d(h, w2, b2, padding=1, groups=g)) + x
        flat = x.flatten(2)
        return {n: e.proj(flat[:, j]) for j, (n, e) in enumerate(zip(names, encs))}

    def forward(self, planes: torch.Tensor) -> torch.Tensor:
        if planes.shape[1:] != (N_PLANES, self.size, self.size):
            raise ContractError(f"expected (B, {N_PLANES}, {self.size}, {self.size}), "
                                f"got {tuple(planes.shape)}")
        weather = self.encoders["weather"]
        feats = {"weather": weather(planes[:, :N_WEATHER])}
        feats.update(self._encode_scalar_groups(planes[:, N_WEATHER:]))
        tsv, jud = fuse_pairs(feats["speed"], feats["volume"], feats["journey_up"],
                              feats["journey_down"], self.fuse_traffic, self.fuse_journey)
        return spatial_representation(feats["weather"], tsv, jud, feats["gap"])
