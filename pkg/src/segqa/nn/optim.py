"""Optimiser construction and the backward/step entry points."""

from __future__ import annotations

from typing import Iterable

import torch


def make_optimizer(params: Iterable[torch.nn.Parameter], name: str = "adam", lr: float = 1e-3,
                   betas: tuple[float, float] = (0.9, 0.999), momentum: float = 0.0) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("backward needs a scalar loss tensor")
    if loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("loss carries no recorded computation; run a forward pass first")
    loss.backward()


def step(optimizer: torch.optim.Optimizer) -> None:
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
