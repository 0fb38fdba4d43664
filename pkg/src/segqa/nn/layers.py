"""Parameterised layers built on :mod:`segqa.nn.functional`."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import functional as fn


def _kernel(rank: int, size: int) -> tuple[int, ...]:
    return (size,) * rank


def _gaussian(shape, fan_in: int, generator: torch.Generator | None) -> torch.Tensor:
    std = math.sqrt(2.0 / fan_in)
    return torch.randn(shape, generator=generator) * std


class Conv(nn.Module):
    def __init__(self, rank, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=True, generator=None):
        super().__init__()
        self.rank, self.stride = rank, stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch) + _kernel(rank, kernel)
        self.weight = nn.Parameter(_gaussian(shape, in_ch * kernel**rank, generator))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None

    def forward(self, x):
        return fn.conv(x, self.weight, self.bias, self.stride, self.padding, self.rank)


class ConvTranspose(nn.Module):
    """Upsampling by an integer factor with a kernel equal to the stride."""

    def __init__(self, rank, in_ch, out_ch, factor, generator=None):
        super().__init__()
        self.rank, self.factor = rank, factor
        shape = (in_ch, out_ch) + _kernel(rank, factor)
        self.weight = nn.Parameter(_gaussian(shape, in_ch, generator))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        return fn.conv_transpose(x, self.weight, self.bias, stride=self.factor, rank=self.rank)


class BatchNorm(nn.Module):
    def __init__(self, channels, momentum=fn.BN_MOMENTUM, eps=fn.BN_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return fn.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
