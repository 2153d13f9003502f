"""Deterministic policy network and its gradient-ascent update."""
from __future__ import annotations

import logging
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .optim import clip_by_global_norm, make_optimizer
from .params import ParamSet, init_mlp, mlp_forward
from .validation import check_fitted, check_matrix

logger = logging.getLogger(__name__)


class DeterministicPolicy(BaseEstimator):
    """MLP policy ``π_θ(s)``; a ``tanh`` output is rescaled to finite action bounds.

    With infinite bounds the output layer stays affine (used by the linear toy
    environment, where values have a closed form).
    """

    def __init__(self, hidden_sizes: Sequence[int] = (32, 32), activation: str = "tanh",
                 optimizer: str = "sgd", learning_rate: float = 1e-3, momentum: float = 0.0,
                 max_grad_norm: float = 10.0, final_layer_scale: float = 1.0):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.final_layer_scale = final_layer_scale

    def initialize(self, state_dim: int, action_low, action_high,
                   rng: np.random.Generator) -> "DeterministicPolicy":
        low = np.asarray(action_low, dtype=np.float64).reshape(-1)
        high = np.asarray(action_high, dtype=np.float64).reshape(-1)
        if low.shape != high.shape or np.any(low >= high):
            raise ValueError(f"invalid action bounds {low} / {high}")
        self.state_dim_ = state_dim
        self.action_dim_ = low.size
        self.low_, self.high_ = low, high
        self.squash_ = bool(np.all(np.isfinite(low)) and np.all(np.isfinite(high)))
        self.arch_ = [state_dim, *self.hidden_sizes, self.action_dim_]
        self.params_ = init_mlp(self.arch_, rng, final_scale=self.final_layer_scale)
        self.opt_ = make_optimizer(self.optimizer, self.learning_rate, self.momentum)
        return self

    def forward(self, s, params=None):
        """Action for state(s) ``s``; arrays or tape nodes, any leading shape."""
        params = self.params_ if params is None else params
        out = mlp_forward(params, s, self.arch_, self.activation, squash=self.squash_, check=False)
        if not self.squash_:
            return out
        half = (self.high_ - self.low_) / 2.0
        center = (self.high_ + self.low_) / 2.0
        return ad.add(ad.mul(out, half), center)

    def act(self, s) -> np.ndarray:
        """Action for a single state vector."""
        check_fitted(self, "params_")
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.state_dim_,):
            raise ValueError(f"state shape {s.shape} != ({self.state_dim_},)")
        if not np.all(np.isfinite(s)):
            raise ValueError("state contains NaN or infinity")
        return self.forward(s[None])[0]

    def predict(self, S) -> np.ndarray:
        check_fitted(self, "params_")
        return self.forward(check_matrix(S, self.state_dim_, "states"))

    def improve(self, grads: Mapping[str, np.ndarray], lr: Optional[float] = None,
                max_norm: Optional[float] = None) -> Optional[float]:
        """Ascent step on the utility; returns the pre-clip gradient norm, or
        ``None`` when the gradient is non-finite and the step is skipped."""
        check_fitted(self, "params_")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            logger.warning("non-finite policy gradient; update skipped")
            return None
        if lr is not None:
            self.opt_.lr = lr
        max_norm = self.max_grad_norm if max_norm is None else max_norm
        clipped, norm = clip_by_global_norm(grads, max_norm)
        self.opt_.step(self.params_, clipped, ascent=True)
        return norm

    def save(self, path) -> None:
        self.params_.save(path, meta={
            "kind": "policy", "arch": self.arch_, "activation": self.activation,
            "low": self.low_.tolist(), "high": self.high_.tolist(),
        })

    @classmethod
    def load(cls, path, **kwargs) -> "DeterministicPolicy":
        params, meta = ParamSet.load(path, with_meta=True)
        arch = meta["arch"]
        policy = cls(hidden_sizes=tuple(arch[1:-1]), activation=meta["activation"], **kwargs)
        low = [float(x) for x in meta["low"]]
        high = [float(x) for x in meta["high"]]
        policy.initialize(arch[0], low, high, np.random.default_rng(0))
        if not all(params[k].shape == policy.params_[k].shape for k in policy.params_):
            raise ValueError(f"{path}: tensor shapes do not match arch {arch}")
        policy.params_ = params
        return policy


def act(policy: DeterministicPolicy, s) -> np.ndarray:
    return policy.act(s)


def improve(policy: DeterministicPolicy, grads, lr: float, max_norm: float):
    return policy.improve(grads, lr=lr, max_norm=max_norm)
