"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_grad(fn: Callable[[dict], torch.Tensor], inputs: dict, name: str, h: float) -> torch.Tensor:
    x = inputs[name]
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn(inputs))
            flat[i] = orig - h
            f_minus = float(fn(inputs))
            flat[i] = orig
            grad.view(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def grad_check(
    fn: Callable[[dict], torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    tolerance: float | None = None,
    h: float | None = None,
    wrt: list[str] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn(inputs)`` with central differences.

    The error for each input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. relative to the gradient's own scale. ``fn`` must not mutate state
    it reads (e.g. pass batch-norm running buffers as ``None``).
    """
    inputs = {k: v.detach().clone() for k, v in inputs.items()}
    dtype = next(iter(inputs.values())).dtype
    double = dtype == torch.float64
    if h is None:
        h = 1e-6 if double else 1e-2
    if tolerance is None:
        tolerance = 1e-6 if double else 1e-3
    wrt = list(inputs) if wrt is None else wrt
    for name in wrt:
        inputs[name].requires_grad_(True)
    out = fn(inputs)
    if out.dim() != 0:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, [inputs[n] for n in wrt], allow_unused=True)
    errors = {}
    for name, a in zip(wrt, analytic):
        a = torch.zeros_like(inputs[name]) if a is None else a
        num = numeric_grad(fn, inputs, name, h)
        a = a.detach().double()
        scale = max(a.abs().max().item(), num.abs().max().item())
        diff = (a - num).abs().max().item()
        errors[name] = 0.0 if scale == 0.0 else diff / scale
    return GradCheckReport(errors, tolerance)
