"""First-order optimizers for numpy parameter arrays.

Parameters are plain arrays mutated in place; each fitting iteration
re-leafs them onto a fresh tape, so the optimizer only ever sees values
and gradients.
"""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list):
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def multistep_lr(base: float, gamma: float, milestones, iteration: int) -> float:
    """Base rate decayed by gamma at each passed milestone."""
    drops = sum(1 for m in milestones if iteration >= m)
    return base * gamma ** drops
