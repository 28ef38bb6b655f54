import math

import numpy as np


def cosine_lr(epoch, lr0, t_max):
    """Cosine-annealed learning rate; ``lr0`` at epoch 0, zero at ``t_max``."""
    return lr0 * (1 + math.cos(math.pi * epoch / t_max)) / 2


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # in place so tensors shared between networks stay shared
            p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
