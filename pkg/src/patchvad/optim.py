"""Optimizers operating on Parameter lists."""

from __future__ import annotations

import numpy as np

from .layers import Parameter


class Adam:
    """Adam with bias correction. Moment slots live on the parameters."""

    def __init__(self, params: list[Parameter], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if p.m is None:
                p.m = np.zeros_like(p.value)
                p.v = np.zeros_like(p.value)
            p.m *= b1
            p.m += (1 - b1) * g
            p.v *= b2
            p.v += (1 - b2) * (g * g)
            mhat = p.m / bc1
            vhat = p.v / bc2
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.value.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Sgd:
    """Plain gradient descent, no momentum."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.value -= (self.lr * p.grad).astype(p.value.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
