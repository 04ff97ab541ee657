"""Optimizers and the learning-rate schedule."""

import math

import numpy as np


class SGD:
    """SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= lr * v
            else:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def cosine_lr(epoch, config, eta_min=0.0):
    """Cosine-annealed learning rate for ``epoch`` in [0, E]."""
    if epoch < 0 or epoch > config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return eta_min + 0.5 * (config.base_lr - eta_min) * (
        1.0 + math.cos(math.pi * epoch / config.epochs)
    )
