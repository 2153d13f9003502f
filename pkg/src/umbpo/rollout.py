"""Finite-horizon model rollouts and the mean/std risk-sensitive utility.

For each start state every ensemble member is unrolled under the policy for
``horizon`` steps, giving one discounted return per member. The spread of
these returns is the model's uncertainty about the policy's value, and the
utility ``mean + risk * std`` is what the policy ascends.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

POLICY_PREFIX = "policy."


class RolloutDivergence(FloatingPointError):
    """A predicted state became NaN/inf during a rollout."""

    def __init__(self, t: int, member: int):
        self.t = t
        self.member = member
        super().__init__(f"non-finite predicted state at rollout step {t} (member {member})")


@dataclass
class RolloutConfig:
    horizon: int = 15
    gamma: float = 0.99
    risk: float = 0.5
    n_starts: int = 8
    variance: str = "population"
    project_unit_circle: bool = True
    eps: float = ad.SQRT_EPS

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.variance not in ("population", "sample"):
            raise ValueError("variance must be 'population' or 'sample'")


@dataclass
class ValueDistribution:
    """Per-member returns ``(B, n)`` for ``n`` start states and their moments."""

    returns: object
    mean: object
    std: object
    horizon: int
    gamma: float

    def numpy(self) -> "ValueDistribution":
        return ValueDistribution(ad.value_of(self.returns).copy(), ad.value_of(self.mean).copy(),
                                 ad.value_of(self.std).copy(), self.horizon, self.gamma)


class TrueModel:
    """Adapter exposing an environment's true F and R through the model interface.

    Every "member" is the true dynamics, so rollouts through it reproduce the
    oracle value exactly.
    """

    def __init__(self, env, n_members: int = 2):
        self.env = env
        self.n_members = n_members

    def predict_next(self, k, s, a, params=None):
        return self.env.dynamics(s, a)

    def predict_all(self, S, A, params=None):
        return self.env.dynamics(S, A)

    def reward(self, s, a, params=None):
        return self.env.reward(s, a)


def project_unit_circle(s, dims: Tuple[int, int], eps: float = ad.SQRT_EPS):
    """Rescale the ``(cos, sin)`` pair at ``dims`` back onto the unit circle."""
    i, j = dims
    d = ad.value_of(s).shape[-1]
    c, sn = s[..., i:i + 1], s[..., j:j + 1]
    r = ad.sqrt(ad.add(ad.square(c), ad.square(sn)), eps)
    pieces = []
    for col in range(d):
        if col == i:
            pieces.append(ad.div(c, r))
        elif col == j:
            pieces.append(ad.div(sn, r))
        else:
            pieces.append(s[..., col:col + 1])
    return ad.concat(pieces, axis=-1)


def _check_finite(s, t: int, member_axis: bool, member: int = 0) -> None:
    v = ad.value_of(s)
    if not np.all(np.isfinite(v)):
        if member_axis:
            bad = np.flatnonzero(~np.all(np.isfinite(v.reshape(v.shape[0], -1)), axis=1))
            member = int(bad[0])
        raise RolloutDivergence(t, member)


def rollout_member(ensemble, k: int, policy, reward_model, s0, horizon: int, gamma: float,
                   policy_params=None, member_params=None, unit_circle=None):
    """Discounted ``horizon``-step return of member ``k`` from start state(s) ``s0``.

    ``s0`` is ``(n, ds)`` (array or node); returns shape ``(n,)``. Rewards are
    summed for ``t = 0..horizon``, so ``horizon=0`` is the immediate reward.
    """
    s = s0
    G = None
    for t in range(horizon + 1):
        a = policy.forward(s, policy_params)
        r = ad.scale(reward_model.reward(s, a), gamma ** t)
        G = r if G is None else ad.add(G, r)
        if t == horizon:
            break
        s = ensemble.predict_next(k, s, a, member_params)
        if unit_circle is not None:
            s = project_unit_circle(s, unit_circle)
        _check_finite(s, t + 1, False, k)
    return G[..., 0]


def rollout_all(ensemble, policy, reward_model, starts, horizon: int, gamma: float,
                policy_params=None, ensemble_params=None, unit_circle=None):
    """Every member's return at once; ``starts`` is ``(n, ds)``, result ``(B, n)``."""
    B = ensemble.n_members
    if ad.is_node(starts):
        S = ad.add(starts, np.zeros((B, 1, 1)))
    else:
        starts = np.asarray(starts, dtype=np.float64)
        S = np.broadcast_to(starts, (B,) + starts.shape)
    G = None
    for t in range(horizon + 1):
        A = policy.forward(S, policy_params)
        r = ad.scale(reward_model.reward(S, A), gamma ** t)
        G = r if G is None else ad.add(G, r)
        if t == horizon:
            break
        S = ensemble.predict_all(S, A, ensemble_params)
        if unit_circle is not None:
            S = project_unit_circle(S, unit_circle)
        _check_finite(S, t + 1, True)
    return G[..., 0]


def value_moments(returns, variance: str = "population", eps: float = ad.SQRT_EPS):
    """Mean and ``sqrt(var + eps)`` over the member axis (axis 0)."""
    B = ad.value_of(returns).shape[0]
    if B < 2:
        raise ValueError("the standard deviation needs at least 2 ensemble members")
    mu = ad.mean(returns, axis=0)
    sq = ad.sum_(ad.square(ad.sub(returns, mu)), axis=0)
    var = ad.scale(sq, 1.0 / (B if variance == "population" else B - 1))
    return mu, ad.sqrt(var, eps)


def utility_from_returns(returns, risk: float, variance: str = "population",
                         eps: float = ad.SQRT_EPS):
    mu, sigma = value_moments(returns, variance, eps)
    return ad.mean(ad.add(mu, ad.scale(sigma, risk))), mu, sigma


def evaluate_utility(policy, starts, config: RolloutConfig, ensemble, reward_model,
                     tape: Optional[ad.Tape] = None, unit_circle=None):
    """Utility ``mean over starts of (μ + c·σ)`` and the value distribution.

    With a ``tape`` the policy parameters are registered as variables named
    ``"policy.<name>"`` and the returned utility is a node on that tape.
    """
    if ensemble.n_members < 2:
        raise ValueError("utility needs an ensemble of at least 2 members")
    starts = np.asarray(starts, dtype=np.float64)
    if starts.ndim != 2 or starts.shape[0] == 0:
        raise ValueError(f"starts must be a non-empty (n, state_dim) array, got {starts.shape}")
    params = None
    S0 = starts
    if tape is not None:
        params = policy.params_.on_tape(tape, prefix=POLICY_PREFIX)
        S0 = tape.constant(starts)
    circle = unit_circle if config.project_unit_circle else None
    G = rollout_all(ensemble, policy, reward_model, S0, config.horizon, config.gamma,
                    policy_params=params, unit_circle=circle)
    U, mu, sigma = utility_from_returns(G, config.risk, config.variance, config.eps)
    return U, ValueDistribution(G, mu, sigma, config.horizon, config.gamma)


def _strip(grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k[len(POLICY_PREFIX):]: g for k, g in grads.items() if k.startswith(POLICY_PREFIX)}


def policy_gradient(policy, starts, config: RolloutConfig, ensemble, reward_model,
                    unit_circle=None, split_members: bool = False, workers: int = 1):
    """Return ``(U, grads, distribution)`` with ``grads`` keyed like ``policy.params_``.

    With ``split_members`` each member is unrolled on its own tape (optionally
    in ``workers`` threads) and the returns are joined on a reduction tape;
    the chain rule is then completed member by member.
    """
    if not split_members:
        tape = ad.Tape()
        U, dist = evaluate_utility(policy, starts, config, ensemble, reward_model, tape, unit_circle)
        grads = _strip(tape.backward(U))
        return float(U.value), grads, dist.numpy()

    starts = np.asarray(starts, dtype=np.float64)
    circle = unit_circle if config.project_unit_circle else None
    B = ensemble.n_members
    if B < 2:
        raise ValueError("utility needs an ensemble of at least 2 members")

    def member_tape(k):
        tape = ad.Tape()
        params = policy.params_.on_tape(tape, prefix=POLICY_PREFIX)
        G = rollout_member(ensemble, k, policy, reward_model, tape.constant(starts),
                           config.horizon, config.gamma, policy_params=params, unit_circle=circle)
        return tape, G

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(member_tape, range(B)))
    else:
        members = [member_tape(k) for k in range(B)]

    red = ad.Tape()
    G_all = red.variable(np.stack([G.value for _, G in members]), name="returns")
    U, mu, sigma = utility_from_returns(G_all, config.risk, config.variance, config.eps)
    dU_dG = red.backward(U)["returns"]

    grads: Dict[str, np.ndarray] = {}
    for k, (tape, G) in enumerate(members):
        root = ad.sum_(ad.mul(G, dU_dG[k]))
        for name, g in _strip(tape.backward(root)).items():
            grads[name] = g if name not in grads else grads[name] + g
    dist = ValueDistribution(G_all.value.copy(), mu.value.copy(), sigma.value.copy(),
                             config.horizon, config.gamma)
    return float(U.value), grads, dist


def value_oracle(policy, s0, env, horizon: int, gamma: float):
    """True discounted return of ``policy`` from ``s0`` using the env's F and R."""
    s = np.asarray(s0, dtype=np.float64)
    single = s.ndim == 1
    S = s[None] if single else s
    G = np.zeros(S.shape[0])
    for t in range(horizon + 1):
        A = policy.forward(S)
        G = G + gamma ** t * np.asarray(env.reward(S, A)).reshape(-1)
        if t == horizon:
            break
        S = np.asarray(env.dynamics(S, A))
    return float(G[0]) if single else G
