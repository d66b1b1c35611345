"""FUSegNet: pretrained EfficientNet encoder, P-scSE decoder, sigmoid head."""
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .attention import AGGREGATIONS, SCSE, PScSE, ScseSettings
from .errors import ConfigError, ShapeError

CACHE_ENV = "FUSEGNET_CACHE"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STRIDES = (2, 4, 8, 16, 32)
ATTENTION_KINDS = ("p_scse",) + AGGREGATIONS + ("none",)

# index of the torchvision `features` block whose output is taken at each stride
_EFFICIENTNET_TAPS = (1, 2, 3, 5, 7)


@dataclass(frozen=True)
class NetworkConfig:
    encoder_name: str = "efficientnet-b7"
    decoder_channels: Tuple[int, ...] = (256, 128, 64, 32, 16)
    input_size: int = 512
    pretrained: bool = True
    weights_path: Optional[str] = None
    reduction_ratio: int = 16
    attention: str = "p_scse"
    upsample: str = "bilinear"
    pre_block: bool = False
    shorted_threshold: int = 32
    encoder_channels: Tuple[int, ...] = (16, 24, 32, 48, 64)  # "tiny" encoder only

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.encoder_name not in ENCODERS:
            raise ConfigError(f"unknown encoder_name {self.encoder_name!r}; available: {sorted(ENCODERS)}")
        dc = self.decoder_channels
        if len(dc) != 5 or any(c < 1 for c in dc):
            raise ConfigError(f"decoder_channels must be 5 positive counts, got {dc}")
        if any(a <= b for a, b in zip(dc, dc[1:])):
            raise ConfigError(f"decoder_channels must be strictly decreasing, got {dc}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}; expected one of {ATTENTION_KINDS}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample must be 'bilinear' or 'nearest', got {self.upsample!r}")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1")
        if len(self.encoder_channels) != 5:
            raise ConfigError("encoder_channels must list 5 stage widths")


# -- encoders ------------------------------------------------------------------

class EfficientNetEncoder(nn.Module):
    """Wraps a torchvision EfficientNet trunk and returns its five stride taps.

    The final 1x1 expansion conv and classifier are dropped: they never feed the
    decoder and would otherwise sit in the model as untrained dead weight.
    """

    def __init__(self, variant: str, pretrained: bool = False, weights_path: Optional[str] = None):
        super().__init__()
        builder = getattr(torchvision.models, f"efficientnet_{variant}")
        net = builder(weights=None)
        if pretrained:
            net.load_state_dict(_pretrained_state(variant, weights_path))
        self.blocks = nn.ModuleList(net.features[: _EFFICIENTNET_TAPS[-1] + 1])
        # eval-mode probe leaves batch-norm statistics and RNG state untouched
        self.eval()
        with torch.no_grad():
            probe = self._taps(torch.zeros(1, 3, 32, 32))
        self.train()
        self.out_channels = [t.shape[1] for t in probe]
        self.mean, self.std = IMAGENET_MEAN, IMAGENET_STD

    def _taps(self, x):
        stages = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in _EFFICIENTNET_TAPS:
                stages.append(x)
        return stages

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self._taps(x)


def _pretrained_state(variant: str, weights_path: Optional[str]):
    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        return state.get("state_dict", state)
    enum = getattr(torchvision.models, f"EfficientNet_{variant.upper()}_Weights").IMAGENET1K_V1
    kwargs = {"progress": False}
    if os.environ.get(CACHE_ENV):
        kwargs["model_dir"] = os.environ[CACHE_ENV]
    return enum.get_state_dict(**kwargs)


class TinyEncoder(nn.Module):
    """Small strided CNN with the same five-tap contract, for CPU-scale runs."""

    def __init__(self, channels: Sequence[int] = (16, 24, 32, 48, 64)):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ))
            cin = cout
        self.stages = nn.ModuleList(layers)
        self.out_channels = list(channels)
        self.mean, self.std = IMAGENET_MEAN, IMAGENET_STD

    def forward(self, x):
        stages = []
        for stage in self.stages:
            x = stage(x)
            stages.append(x)
        return stages


def _efficientnet(variant):
    return lambda cfg: EfficientNetEncoder(variant, cfg.pretrained, cfg.weights_path)


ENCODERS = {f"efficientnet-b{i}": _efficientnet(f"b{i}") for i in range(8)}
ENCODERS["tiny"] = lambda cfg: TinyEncoder(cfg.encoder_channels)


def build_encoder(cfg: NetworkConfig) -> nn.Module:
    return ENCODERS[cfg.encoder_name](cfg)


# -- decoder -------------------------------------------------------------------

def conv_bn_relu(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


@dataclass(frozen=True)
class DecoderStageConfig:
    out_channels: int
    use_skip: bool = True
    shorted: bool = False
    pre_block: bool = False


def make_attention(kind: str, channels: int, reduction_ratio: int, shorted: bool) -> nn.Module:
    if kind == "p_scse":
        return PScSE(channels, ScseSettings(reduction_ratio=reduction_ratio, shorted=shorted))
    if kind == "none":
        return nn.Identity()
    return SCSE(channels, ScseSettings(reduction_ratio=reduction_ratio, aggregation=kind))


class DecoderBlock(nn.Module):
    """Upsample x2, concatenate the skip, attend, then Conv-BN-ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, cfg: DecoderStageConfig,
                 attention: str = "p_scse", reduction_ratio: int = 16, upsample: str = "bilinear"):
        super().__init__()
        self.cfg = cfg
        self.upsample = upsample
        self.skip_channels = skip_channels if cfg.use_skip else 0
        channels = in_channels + self.skip_channels
        self.pre = conv_bn_relu(channels, channels) if cfg.pre_block else nn.Identity()
        self.attention = make_attention(attention, channels, reduction_ratio, cfg.shorted)
        att_out = getattr(self.attention, "out_channels", channels)
        self.conv = conv_bn_relu(att_out, cfg.out_channels)

    def forward(self, prev: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.upsample == "bilinear":
            x = F.interpolate(prev, scale_factor=2, mode="bilinear", align_corners=False)
        else:
            x = F.interpolate(prev, scale_factor=2, mode="nearest")
        if self.cfg.use_skip:
            if skip is None:
                raise ShapeError("decoder stage expects a skip connection")
            if skip.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"upsampled map {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
            x = torch.cat([x, skip], dim=1)
        return self.conv(self.attention(self.pre(x)))


def decoder_stage_configs(cfg: NetworkConfig, encoder_channels: Sequence[int]) -> List[DecoderStageConfig]:
    """Stage layout: skips from the four shallower taps, none at full resolution.

    The final stage is always shorted; any earlier stage whose input width falls
    below ``cfg.shorted_threshold`` is shorted too.
    """
    skips = list(encoder_channels[:-1])[::-1] + [0]
    in_ch = [encoder_channels[-1]] + list(cfg.decoder_channels[:-1])
    stages = []
    for i, out in enumerate(cfg.decoder_channels):
        last = i == len(cfg.decoder_channels) - 1
        width = in_ch[i] + skips[i]
        stages.append(DecoderStageConfig(
            out_channels=out,
            use_skip=not last,
            shorted=last or width < cfg.shorted_threshold,
            pre_block=cfg.pre_block,
        ))
    return stages


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig, encoder_channels: Sequence[int]):
        super().__init__()
        self.stage_configs = decoder_stage_configs(cfg, encoder_channels)
        skips = list(encoder_channels[:-1])[::-1] + [0]
        cin = encoder_channels[-1]
        blocks = []
        for sc, skip in zip(self.stage_configs, skips):
            blocks.append(DecoderBlock(cin, skip, sc, cfg.attention, cfg.reduction_ratio, cfg.upsample))
            cin = sc.out_channels
        self.blocks = nn.ModuleList(blocks)

    def forward(self, stages: Sequence[torch.Tensor]) -> torch.Tensor:
        skips = list(stages[:-1])[::-1] + [None]
        x = stages[-1]
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
        return x


class FUSegNet(nn.Module):
    """Encoder-decoder network producing a per-pixel ulcer probability map."""

    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.decoder = Decoder(cfg, self.encoder.out_channels)
        self.head = nn.Conv2d(cfg.decoder_channels[-1], 1, kernel_size=3, padding=1)

    @property
    def mean(self):
        return self.encoder.mean

    @property
    def std(self):
        return self.encoder.std

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, H, W) image batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        return self.encoder(x)

    def decode(self, stages: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.sigmoid(self.head(self.decoder(stages)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
