"""SGD with classical momentum and coupled weight decay.

Update rule, applied per parameter:

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

Velocity buffers start at zero and live inside the optimizer, so a fresh
optimizer always reproduces the same trajectory from the same
parameters and gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tensor

__all__ = ["SGD"]


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params: list[Tensor] = list(params)
        if not self.params:
            raise ValueError("SGD: empty parameter list")
        for p in self.params:
            if not isinstance(p, Tensor):
                raise TypeError("SGD expects Tensor parameters")
        if lr < 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("SGD: lr, momentum, and weight_decay must be >= 0")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update. Parameters with no gradient are left untouched."""
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"SGD: grad shape {p.grad.shape} != param shape "
                                 f"{p.data.shape}")
            step_dir = p.grad
            if self.weight_decay:
                step_dir = step_dir + self.weight_decay * p.data
            v *= self.momentum
            v += step_dir
            p.data = p.data - self.lr * v
            if not np.all(np.isfinite(p.data)):
                raise NumericError("SGD: non-finite parameter after update")

    def state_arrays(self) -> list[np.ndarray]:
        """Velocity buffers in parameter order (for checkpointing)."""
        return self.velocity

    def load_state_arrays(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.velocity):
            raise ShapeError("SGD: velocity count mismatch on load")
        for i, (v, a) in enumerate(zip(self.velocity, arrays)):
            if v.shape != a.shape:
                raise ShapeError(f"SGD: velocity {i} shape {a.shape} != {v.shape}")
            self.velocity[i] = np.array(a, dtype=v.dtype)
