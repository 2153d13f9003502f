"""First-order optimizers acting in place on :class:`ParamSet` tensors."""
from __future__ import annotations

from typing import Mapping, Tuple

import numpy as np

from .params import ParamSet


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[dict, float]:
    """Rescale ``grads`` so their joint l2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


class SGD:
    """Plain SGD, optionally with heavy-ball momentum."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict = {}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray], ascent: bool = False) -> None:
        sign = 1.0 if ascent else -1.0
        for k, g in grads.items():
            if self.momentum:
                v = self._velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[k] = v
                g = v
            params[k] = params[k] + sign * self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict = {}
        self._v: dict = {}
        self._t = 0

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray], ascent: bool = False) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        sign = 1.0 if ascent else -1.0
        for k, g in grads.items():
            m = self._m.get(k)
            v = self._v.get(k)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[k], self._v[k] = m, v
            params[k] = params[k] + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.0):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
