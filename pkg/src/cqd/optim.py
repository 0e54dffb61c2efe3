"""SGD with classical momentum and the linear learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")


def sgd_step(params: Mapping[str, Tensor], state: SgdState,
             grads: Mapping[str, np.ndarray] | None = None) -> None:
    """In-place update ``v = m*v - lr*(g + wd*theta); theta += v``.

    ``grads`` defaults to each parameter's ``.grad``.  A parameter with no
    gradient is treated as having a zero gradient (weight decay still
    applies).
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ContractError(f"velocity for {name!r} has shape {v.shape}, parameter {p.data.shape}")
        step = g + state.weight_decay * p.data if state.weight_decay else g
        v = (state.momentum * v - state.lr * step).astype(p.data.dtype, copy=False)
        state.velocity[name] = v
        p.data += v


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float | None) -> float:
    """Rescale all ``.grad`` arrays in place so their joint L2 norm is at most
    ``max_norm``; returns the norm before clipping.  ``None`` disables it."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def lr_at(epoch: int, config) -> float:
    """Learning rate for ``epoch``: linear from ``lr_start`` to ``lr_end``
    over ``schedule_epochs`` epochs, then held at ``lr_end``."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    start, end, span = config.lr_start, config.lr_end, config.schedule_epochs
    if span <= 0 or epoch >= span:
        return float(end)
    return float(start + (end - start) * epoch / span)
