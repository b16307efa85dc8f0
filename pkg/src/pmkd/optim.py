"""SGD with momentum and the step learning-rate schedule."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def lr_at_epoch(epoch: int, base: float = 0.1,
                milestones: Sequence[int] = (60, 120, 160),
                factor: float = 0.2) -> float:
    """base * factor^(number of milestones <= epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * factor ** sum(1 for m in milestones if m <= epoch)


class SGD:
    """Heavy-ball SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Weight decay is added to the gradient before the momentum update
    (classic coupled form, not decoupled decay). Parameters with a None
    gradient are treated as zero-gradient, so decay still applies.
    """

    def __init__(self, params: Sequence[tuple[str, Tensor]],
                 momentum: float = 0.9, weight_decay: float = 1e-5):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        mu = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for (name, p), v in zip(self.params, self.velocity):
            g = p.grad
            if g is not None and g.shape != p.data.shape:
                raise ShapeError(f"sgd: grad shape {g.shape} != param shape "
                                 f"{p.data.shape} for {name}")
            v *= mu
            if g is not None:
                v += g
            if self.weight_decay != 0.0:
                v += wd * p.data
            p.data -= np.float32(lr) * v

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
