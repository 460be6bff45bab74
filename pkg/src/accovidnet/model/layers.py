"""PEPX blocks and attention gates.

Tensors use the torch layout ``(batch, channels, height, width)``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError
from .config import AttentionGateConfig, PEPXConfig


def resample(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling onto a ``size`` grid; identity when already there."""
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)


class PEPX(nn.Module):
    """conv1x1 -> conv1x1 -> depthwise conv3x3 -> conv1x1 -> conv1x1, ReLU after each."""

    def __init__(self, config: PEPXConfig):
        super().__init__()
        self.config = config
        c = config
        self.conv1 = nn.Conv2d(c.in_channels, c.proj1_channels, 1, bias=c.bias)
        self.conv2 = nn.Conv2d(c.proj1_channels, c.expand_channels, 1, bias=c.bias)
        self.conv3 = nn.Conv2d(
            c.expand_channels, c.expand_channels, 3, padding=1, groups=c.expand_channels, bias=c.bias
        )
        self.conv4 = nn.Conv2d(c.expand_channels, c.proj2_channels, 1, bias=c.bias)
        self.conv5 = nn.Conv2d(c.proj2_channels, c.out_channels, 1, bias=c.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"PEPX expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            x = F.relu(conv(x))
        return x


class AttentionGate(nn.Module):
    """Additive attention gate: sigma(psi(relu(theta(x) + phi(g)))) applied to ``x``.

    The gating projection is resampled onto the grid of ``x`` before the sum, and
    the attention map is resampled to ``x`` again before the combine step. In
    ``multiplicative`` mode the map scales ``x``; in ``additive`` mode it is
    broadcast-added across channels.
    """

    def __init__(self, config: AttentionGateConfig):
        super().__init__()
        self.config = config
        self.theta = nn.Conv2d(config.x_channels, config.inter_channels, 1)
        self.phi = nn.Conv2d(config.g_channels, config.inter_channels, 1)
        self.psi = nn.Conv2d(config.inter_channels, 1, 1)

    def attention(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """Attention coefficients of shape ``(batch, 1, H_x, W_x)``."""
        cfg = self.config
        if x.shape[1] != cfg.x_channels or g.shape[1] != cfg.g_channels:
            raise ConfigurationError(
                f"attention gate expects x/g channels {cfg.x_channels}/{cfg.g_channels}, "
                f"got {x.shape[1]}/{g.shape[1]}"
            )
        if g.shape[-2] > x.shape[-2] or g.shape[-1] > x.shape[-1]:
            raise ConfigurationError(
                f"gating map {tuple(g.shape[-2:])} is larger than x {tuple(x.shape[-2:])}"
            )
        grid = tuple(x.shape[-2:])
        q = F.relu(self.theta(x) + resample(self.phi(g), grid))
        alpha = torch.sigmoid(self.psi(q))
        return resample(alpha, grid)

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        alpha = self.attention(x, g)
        if self.config.combine_mode == "multiplicative":
            return alpha * x
        return alpha + x
