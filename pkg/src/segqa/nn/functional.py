"""Differentiable operations used by the segmentation networks.

Thin, validated wrappers over ``torch.nn.functional`` for the layer set plus
the composite training losses. Tensors are channel-first:
``(batch, channels, *spatial)`` with 2 or 3 spatial axes.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
DICE_EPS = 1e-5
CE_EPS = 1e-7


def _rank(input: torch.Tensor, weight: torch.Tensor, rank: int | None) -> int:
    spatial = input.dim() - 2
    if spatial not in (2, 3):
        raise ValueError(f"expected (N, C, *spatial) with 2 or 3 spatial axes, got {tuple(input.shape)}")
    if rank is not None and rank != spatial:
        raise ValueError(f"rank {rank} does not match input with {spatial} spatial axes")
    if weight.dim() != spatial + 2:
        raise ValueError(f"weight shape {tuple(weight.shape)} does not match rank {spatial}")
    return spatial


def conv(input, weight, bias=None, stride=1, padding=0, rank=None) -> torch.Tensor:
    """Cross-correlation; ``weight`` is ``(out, in, *kernel)``.

    Output size per axis is ``floor((n + 2p - k) / stride) + 1``.
    """
    r = _rank(input, weight, rank)
    if input.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {input.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    fn = F.conv3d if r == 3 else F.conv2d
    return fn(input, weight, bias, stride=stride, padding=padding)


def conv_transpose(input, weight, bias=None, stride=1, padding=0, output_size=None, rank=None) -> torch.Tensor:
    """Adjoint of :func:`conv` with the same ``weight`` tensor and geometry.

    ``weight`` is ``(in, out, *kernel)`` here, i.e. the same tensor a forward
    conv from ``out`` to ``in`` channels would use. ``output_size`` (spatial
    only) resolves the ambiguity when ``stride > 1``.
    """
    r = _rank(input, weight, rank)
    if input.shape[1] != weight.shape[0]:
        raise ValueError(f"input has {input.shape[1]} channels, weight expects {weight.shape[0]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    output_padding = 0
    if output_size is not None:
        output_size = tuple(output_size)[-r:]
        base = [
            (n - 1) * stride - 2 * padding + k
            for n, k in zip(input.shape[2:], weight.shape[2:])
        ]
        extra = [o - b for o, b in zip(output_size, base)]
        if any(e < 0 or e >= stride for e in extra):
            raise ValueError(f"output size {output_size} unreachable from input {tuple(input.shape[2:])}")
        output_padding = tuple(extra)
    fn = F.conv_transpose3d if r == 3 else F.conv_transpose2d
    return fn(input, weight, bias, stride=stride, padding=padding, output_padding=output_padding)


def batch_norm(
    input,
    scale,
    shift,
    running_mean=None,
    running_var=None,
    training=True,
    momentum=BN_MOMENTUM,
    eps=BN_EPS,
) -> torch.Tensor:
    """Per-channel normalisation.

    Training mode uses batch statistics and, if running buffers are given,
    updates them as ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running buffers.
    """
    c = input.shape[1]
    for name, t in (("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)):
        if t is not None and t.shape != (c,):
            raise ValueError(f"{name} has shape {tuple(t.shape)}, expected ({c},)")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("eval-mode batch norm needs running statistics")
    return F.batch_norm(
        input, running_mean, running_var, scale, shift,
        training=training, momentum=1.0 - momentum, eps=eps,
    )


def relu(input) -> torch.Tensor:
    return F.relu(input)


def softmax_channels(input) -> torch.Tensor:
    return torch.softmax(input, dim=1)


def add(a, b) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def cross_entropy(probs, target, eps=CE_EPS) -> torch.Tensor:
    """Mean over voxels of ``-log p[target]``.

    ``probs`` holds class probabilities ``(N, K, *spatial)``; ``target`` holds
    integer labels ``(N, *spatial)``.
    """
    target = target.long()
    k = probs.shape[1]
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match probs {tuple(probs.shape)}")
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target labels must lie in [0, {k - 1}]")
    picked = probs.gather(1, target.unsqueeze(1))
    return -torch.log(picked.clamp_min(eps)).mean()


def dice_loss(probs, target_one_hot, mode="multiclass", eps=DICE_EPS) -> torch.Tensor:
    """``1 - mean_c (2 Σ p q + eps) / (Σ p + Σ q + eps)``.

    ``multiclass`` averages over foreground channels ``1..K-1``; ``binary``
    scores channel 1 (the positive class) only.
    """
    if probs.shape != target_one_hot.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target_one_hot.shape)}")
    if mode == "multiclass":
        p, q = probs[:, 1:], target_one_hot[:, 1:]
    elif mode == "binary":
        p, q = probs[:, 1:2], target_one_hot[:, 1:2]
    else:
        raise ValueError(f"unknown dice mode {mode!r}")
    if p.shape[1] == 0:
        raise ValueError("dice loss needs at least one foreground channel")
    dims = [0] + list(range(2, probs.dim()))
    inter = (p * q).sum(dim=dims)
    denom = p.sum(dim=dims) + q.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def composite_loss(probs, target, mode="multiclass") -> torch.Tensor:
    """Cross entropy plus Dice with unit weights."""
    onehot = F.one_hot(target.long(), probs.shape[1]).movedim(-1, 1).to(probs.dtype)
    return cross_entropy(probs, target) + dice_loss(probs, onehot, mode)
