from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import NonFiniteError
from .layers import Parameter


class MissingGradientError(KeyError):
    pass


class Adam:
    """Adam with bias correction. One instance per component; state never shared."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {id(p): np.zeros(p.shape) for p in self.params}
        self.v = {id(p): np.zeros(p.shape) for p in self.params}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        missing = [p.name for p in self.params if p not in grads]
        if missing:
            raise MissingGradientError(f"no gradient for parameter {missing[0]!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p in self.params:
            g = grads[p]
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            with np.errstate(over="ignore", invalid="ignore"):
                v += (1.0 - b2) * g * g
            if not (np.isfinite(m).all() and np.isfinite(v).all()):
                raise NonFiniteError(f"Adam moments for {p.name!r} are no longer finite")
            # rebind rather than mutate: arrays saved on old tapes stay valid
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))
