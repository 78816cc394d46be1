"""Adam with an exponentially decaying learning rate."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LR_START = 1e-2
LR_END = 5e-3


def learning_rate(iteration: int, total: int, start: float = LR_START, end: float = LR_END) -> float:
    """Exponential interpolation: ``start`` at iteration 0, ``end`` at ``total - 1``."""
    if total <= 1:
        return start
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    return start * math.exp(frac * math.log(end / start))


@njit(cache=True)
def _adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    skipped = 0
    for i in range(p.shape[0]):
        gi = g[i]
        if not np.isfinite(gi):
            skipped += 1
            continue
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
    return skipped


class Adam:
    """Dense Adam over a fixed list of (param, grad) arrays.

    Non-finite gradient entries leave their parameter and moments untouched
    and are counted in the return value of :meth:`step`.
    """

    def __init__(self, pairs, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15):
        self.pairs = list(pairs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.size, dtype=p.dtype) for p, _ in self.pairs]
        self.v = [np.zeros(p.size, dtype=p.dtype) for p, _ in self.pairs]
        self.t = 0

    def step(self, lr: float) -> int:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        skipped = 0
        for (p, g), m, v in zip(self.pairs, self.m, self.v):
            skipped += _adam_update(p.reshape(-1), g.reshape(-1), m, v, lr,
                                    self.beta1, self.beta2, self.eps, bc1, bc2)
        return int(skipped)
