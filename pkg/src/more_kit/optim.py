"""Decoupled-weight-decay adaptive optimizer with linear warmup then linear
decay to zero over the configured number of steps."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, total_steps: int = 1,
                 warmup_frac: float = 0.1):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = max(1, total_steps)
        self.warmup_steps = int(round(warmup_frac * self.total_steps))
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        """Schedule for the upcoming (0-based) step: ramp to peak over the
        warmup steps, then decay linearly toward zero, never reaching it."""
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, self.total_steps - self.t) / span

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        lr_t = self.current_lr()
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            if self.weight_decay:
                p.data -= lr_t * self.weight_decay * p.data
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
