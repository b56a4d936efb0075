"""Local solvers applied to a gradient: plain descent and Adam."""
from __future__ import annotations

import numpy as np

from .params import ParamSet


class SGD:
    """``w <- w - lr * g``."""

    def step(self, w: ParamSet, grad: ParamSet, lr: float) -> ParamSet:
        return w.axpy(-lr, grad)


class Adam:
    """Adam with bias correction; moment estimates persist across calls."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, w: ParamSet, grad: ParamSet, lr: float) -> ParamSet:
        w.check_compatible(grad)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, g in grad.items():
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = w[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return ParamSet._wrap(out)


def make(name: str):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}; expected sgd or adam")
