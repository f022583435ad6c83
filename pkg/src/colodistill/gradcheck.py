"""Central finite-difference gradients for verifying autograd losses."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def autograd_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> np.ndarray:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return np.concatenate(
        [(torch.zeros_like(p) if g is None else g).detach().double().reshape(-1).numpy() for p, g in zip(params, grads)]
    )


@torch.no_grad()
def central_difference(
    loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6
) -> np.ndarray:
    """Perturb every scalar parameter by +-eps in place and difference the loss."""
    out = []
    for p in params:
        flat = p.data.view(-1)
        g = np.empty(flat.numel())
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return np.concatenate(out)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return num / den


def check(loss_fn, params, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences."""
    return relative_error(autograd_gradient(loss_fn, params), central_difference(loss_fn, params, eps))
