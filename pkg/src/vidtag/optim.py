"""Adam with linear warmup and step decay."""

from dataclasses import dataclass

import numpy as np

from .errors import GraphStateError


@dataclass
class LrSchedule:
    base_lr: float
    decay: float = 1.0
    decay_interval: int = 1  # optimizer steps per decay (one epoch in training)
    warmup_steps: int = 1000

    def __call__(self, step):
        """Learning rate used by the ``step``-th update (1-based)."""
        ramp = 1.0 if self.warmup_steps <= 0 else min(1.0, step / self.warmup_steps)
        return self.base_lr * ramp * self.decay ** (step // max(1, self.decay_interval))


class Adam:
    def __init__(self, params, schedule, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self):
        return self.schedule(max(self.step_count, 1))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise GraphStateError(f"optimizer step before backward; no gradient for {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        lr = self.schedule(t)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = np.asarray(p.data - update, dtype=p.dtype)
        return lr
