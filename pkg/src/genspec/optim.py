"""Bias-corrected adaptive optimizer with decoupled weight decay.

One optimizer instance owns moment buffers for a fixed parameter list. Decay
is decoupled: it shrinks the parameter directly instead of entering the
moment estimates, and it is scaled by the scheduled learning rate like the
gradient step itself.
"""

from __future__ import annotations

import numpy as np

from .errors import GenspecError
from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        warmup_steps: int = 0,
    ):
        if lr <= 0:
            raise GenspecError(f"learning rate must be positive, got {lr}")
        if not (0 < betas[0] < 1 and 0 < betas[1] < 1):
            raise GenspecError(f"betas must lie in (0, 1), got {betas}")
        if weight_decay < 0:
            raise GenspecError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def current_lr(self) -> float:
        """Scheduled rate for the NEXT step (linear warmup, then constant)."""
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params."""
        lr_t = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GenspecError(f"non-finite gradient for parameter {p.name or f'#{i}'}")
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            if self.weight_decay:
                p.data -= lr_t * self.weight_decay * p.data
            p.data -= lr_t * mhat / (np.sqrt(vhat) + self.eps)
