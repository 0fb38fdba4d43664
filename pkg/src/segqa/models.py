"""VoxResNet-style networks with four deep-supervision side heads.

Each network has four resolution stages. Stage ``s`` (1-based) runs at
``1/2**(s-1)`` of the input resolution and feeds a side head that is
upsampled back to full resolution by a transposed convolution. The final
head fuses the four upsampled side features with a 1-sized convolution.
Side heads are tagged ``SIDE2`` .. ``SIDE5`` (stage 1 .. stage 4).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .nn import functional as fn
from .nn.layers import BatchNorm, Conv, ConvTranspose

NUM_STAGES = 4
DOWNSAMPLE = 2 ** (NUM_STAGES - 1)


class HeadId(enum.IntEnum):
    """Output head; values are the scatter-plot codes (0 = ground truth)."""

    GTRUTH = 0
    FINAL = -1
    SIDE2 = -2
    SIDE3 = -3
    SIDE4 = -4
    SIDE5 = -5

    @property
    def label(self) -> str:
        return {HeadId.GTRUTH: "GT", HeadId.FINAL: "Final"}.get(self, str(-int(self)))


NETWORK_HEADS = (HeadId.SIDE2, HeadId.SIDE3, HeadId.SIDE4, HeadId.SIDE5, HeadId.FINAL)


@dataclass(frozen=True)
class NetConfig:
    rank: int = 3
    in_channels: int = 1
    out_classes: int = 4
    base_channels: int = 8
    blocks_per_stage: int = 1
    num_stages: int = NUM_STAGES
    side_channels: int = 8

    def __post_init__(self):
        if self.num_stages != NUM_STAGES:
            raise ValueError(f"num_stages must be {NUM_STAGES} (one side head per stage)")
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        for name in ("in_channels", "base_channels", "side_channels", "blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.out_classes < 2:
            raise ValueError("need at least two output classes")

    @property
    def widths(self) -> tuple[int, ...]:
        b = self.base_channels
        return (b, 2 * b, 2 * b, 4 * b)

    def to_dict(self) -> dict:
        return asdict(self)


class VoxRes(nn.Module):
    """Pre-activation residual unit: x + conv(relu(bn(conv(relu(bn(x))))))."""

    def __init__(self, rank, ch, generator=None):
        super().__init__()
        self.bn1 = BatchNorm(ch)
        self.conv1 = Conv(rank, ch, ch, generator=generator)
        self.bn2 = BatchNorm(ch)
        self.conv2 = Conv(rank, ch, ch, generator=generator)

    def forward(self, x):
        y = self.conv1(fn.relu(self.bn1(x)))
        y = self.conv2(fn.relu(self.bn2(y)))
        return fn.add(x, y)


class Stage(nn.Module):
    def __init__(self, rank, in_ch, out_ch, stride, blocks, generator=None):
        super().__init__()
        self.bn = BatchNorm(in_ch)
        self.conv = Conv(rank, in_ch, out_ch, stride=stride, generator=generator)
        self.blocks = nn.Sequential(*[VoxRes(rank, out_ch, generator) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.conv(fn.relu(self.bn(x))))


class VoxResNet(nn.Module):
    def __init__(self, config: NetConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        r, w = config.rank, config.widths
        self.stem = Conv(r, config.in_channels, w[0], generator=generator)
        self.stages = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.side_bns = nn.ModuleList()
        self.classifiers = nn.ModuleList()
        prev = w[0]
        for s, width in enumerate(w):
            self.stages.append(Stage(r, prev, width, 1 if s == 0 else 2, config.blocks_per_stage, generator))
            self.side_bns.append(BatchNorm(width))
            factor = 2**s
            if factor == 1:
                self.ups.append(Conv(r, width, config.side_channels, kernel=1, generator=generator))
            else:
                self.ups.append(ConvTranspose(r, width, config.side_channels, factor, generator))
            self.classifiers.append(Conv(r, config.side_channels, config.out_classes, kernel=1, generator=generator))
            prev = width
        self.fuse = Conv(r, NUM_STAGES * config.side_channels, config.out_classes, kernel=1, generator=generator)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Logits for ``[SIDE2, SIDE3, SIDE4, SIDE5, FINAL]`` at input resolution."""
        spatial = x.shape[2:]
        pad = [(-n) % DOWNSAMPLE for n in spatial]
        if any(pad):
            # F.pad takes pairs starting from the last axis
            x = F.pad(x, [p for n in reversed(pad) for p in (0, n)])
        h = self.stem(x)
        side_feats, logits = [], []
        for stage, bn, up, cls in zip(self.stages, self.side_bns, self.ups, self.classifiers):
            h = stage(h)
            g = fn.relu(up(fn.relu(bn(h))))
            side_feats.append(g)
            logits.append(cls(g))
        logits.append(self.fuse(torch.cat(side_feats, dim=1)))
        if any(pad):
            crop = (slice(None), slice(None)) + tuple(slice(0, n) for n in spatial)
            logits = [t[crop] for t in logits]
        return logits


def build_segmentor(config: NetConfig, generator: torch.Generator | None = None) -> VoxResNet:
    if config.in_channels != 1:
        raise ValueError("a segmentor takes the image as its single input channel")
    return VoxResNet(config, generator)


def segmentor_config(num_classes: int, rank: int = 3, **kwargs) -> NetConfig:
    return NetConfig(rank=rank, in_channels=1, out_classes=num_classes + 1, **kwargs)


def predictor_config(num_classes: int, **kwargs) -> NetConfig:
    """Input is the image plus the one-hot mask; output is correct/error."""
    return NetConfig(rank=3, in_channels=1 + num_classes + 1, out_classes=2, **kwargs)


def build_predictor(config: NetConfig, generator: torch.Generator | None = None) -> VoxResNet:
    if config.out_classes != 2:
        raise ValueError("the error-map predictor has exactly two output classes")
    if config.in_channels < 3:
        raise ValueError("predictor input is the image plus a one-hot mask of at least 2 channels")
    return VoxResNet(config, generator)


def forward_all_heads(model: VoxResNet, input: torch.Tensor) -> list[tuple[HeadId, torch.Tensor]]:
    """Class probabilities for every head, ordered side 2..5 then final."""
    expected = model.config.rank + 2
    if input.dim() != expected or input.shape[1] != model.config.in_channels:
        raise ValueError(
            f"expected input (N, {model.config.in_channels}, *spatial) of rank {expected}, "
            f"got {tuple(input.shape)}"
        )
    return [(head, fn.softmax_channels(z)) for head, z in zip(NETWORK_HEADS, model(input))]


def predict_soft_error(predictor: VoxResNet, input: torch.Tensor) -> torch.Tensor:
    """Error-class probability from the final head, shape ``(N, *spatial)``."""
    probs = fn.softmax_channels(predictor(input)[-1])
    return probs[:, 1]
