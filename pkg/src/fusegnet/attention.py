"""Squeeze-and-excitation blocks: cSE, sSE, scSE and the parallel (P-scSE) fusion.

All blocks take NCHW tensors. ``PScSE`` runs one channel branch and one spatial
branch and feeds both aggregations from those two results, so the max-out and
additive paths share parameters.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError

AGGREGATIONS = ("max_out", "additive", "multiplicative", "concat")


@dataclass(frozen=True)
class ScseSettings:
    """Construction settings for an scSE-family block.

    ``reduction_ratio`` is clamped per block so the bottleneck is never
    narrower than one unit. ``shorted`` selects the shorted P-scSE variant
    where the block input replaces the max-out branch.
    """

    reduction_ratio: int = 16
    aggregation: str = "additive"
    shorted: bool = False
    bias: bool = True

    def __post_init__(self):
        if not isinstance(self.reduction_ratio, int) or self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be a positive integer, got {self.reduction_ratio!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")


def bottleneck_width(channels: int, reduction_ratio: int) -> int:
    return max(1, channels // min(reduction_ratio, channels))


def _check_channels(x: torch.Tensor, channels: int, name: str):
    if x.dim() != 4:
        raise ConfigError(f"{name} expects an NCHW tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ConfigError(f"{name} was built for {channels} channels but received {x.shape[1]}")


class ChannelSE(nn.Module):
    """cSE: global average pool, bottleneck MLP, sigmoid, channel-wise rescale."""

    def __init__(self, channels: int, reduction_ratio: int = 16, bias: bool = True):
        super().__init__()
        self.channels = channels
        hidden = bottleneck_width(channels, reduction_ratio)
        self.fc1 = nn.Linear(channels, hidden, bias=bias)
        self.fc2 = nn.Linear(hidden, channels, bias=bias)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        """Channel gains of shape (N, C), each in (0, 1)."""
        _check_channels(x, self.channels, "ChannelSE")
        squeezed = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(squeezed))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None]


class SpatialSE(nn.Module):
    """sSE: 1x1 projection to a single map, sigmoid, pixel-wise rescale."""

    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        self.channels = channels
        self.project = nn.Conv2d(channels, 1, kernel_size=1, bias=bias)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        """Spatial gains of shape (N, 1, H, W), each in (0, 1)."""
        _check_channels(x, self.channels, "SpatialSE")
        return torch.sigmoid(self.project(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


def aggregate(c: torch.Tensor, s: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "max_out":
        return torch.maximum(c, s)
    if mode == "additive":
        return c + s
    if mode == "multiplicative":
        return c * s
    if mode == "concat":
        return torch.cat([c, s], dim=1)
    raise ConfigError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")


class SCSE(nn.Module):
    """Concurrent spatial and channel SE with a selectable aggregation.

    ``concat`` doubles the channel count; every other mode preserves shape.
    """

    def __init__(self, channels: int, settings: ScseSettings = ScseSettings()):
        super().__init__()
        self.channels = channels
        self.aggregation = settings.aggregation
        self.cse = ChannelSE(channels, settings.reduction_ratio, settings.bias)
        self.sse = SpatialSE(channels, settings.bias)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.aggregation == "concat" else self.channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return aggregate(self.cse(x), self.sse(x), self.aggregation)


class PScSE(nn.Module):
    """Parallel scSE: max-out scSE plus additive scSE, no further recalibration.

    With ``settings.shorted`` the max-out branch is bypassed and the block
    input is added to the additive branch instead.
    """

    def __init__(self, channels: int, settings: ScseSettings = ScseSettings()):
        super().__init__()
        self.channels = channels
        self.shorted = settings.shorted
        self.cse = ChannelSE(channels, settings.reduction_ratio, settings.bias)
        self.sse = SpatialSE(channels, settings.bias)

    @property
    def out_channels(self) -> int:
        return self.channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.cse(x)
        s = self.sse(x)
        additive = c + s
        if self.shorted:
            return x + additive
        return torch.maximum(c, s) + additive


def p_scse(block: PScSE, x: torch.Tensor) -> torch.Tensor:
    if block.shorted:
        raise ConfigError("block is configured as shorted P-scSE; call shorted_p_scse instead")
    return block(x)


def shorted_p_scse(block: PScSE, x: torch.Tensor) -> torch.Tensor:
    if not block.shorted:
        raise ConfigError("block is configured as full P-scSE; call p_scse instead")
    return block(x)


def zero_weights_(module: nn.Module) -> nn.Module:
    """Set every parameter of ``module`` to zero in place (test fixtures, ablations)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
