"""Shared numeric test helpers."""

import math

import torch


def gelu_exact(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def central_diff_grad(loss_fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar loss wrt x, in place."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(1e-3, dtype=a.dtype))
    return ((a - b).abs() / denom).max().item()
