"""Native continuous-control environments with oracle access to F and R.

Dynamics and reward are written with the dispatching ops from
:mod:`umbpo.autodiff`, so the same expressions evaluate plain arrays (for
``step`` and the oracle) or tape nodes (for perfect-model rollouts).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    dt: float
    # (cos, sin) observation indices that live on the unit circle
    unit_circle: Optional[Tuple[int, int]] = None

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high)))


class Env:
    spec: EnvSpec

    def __init__(self):
        self._obs: Optional[np.ndarray] = None
        self.t = 0

    # subclasses provide dynamics(s, a), reward(s, a) and _sample_initial(rng)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._obs = self._sample_initial(rng)
        self.t = 0
        return self._obs.copy()

    @property
    def observation(self) -> np.ndarray:
        if self._obs is None:
            raise EnvError("environment must be reset before use")
        return self._obs.copy()

    def _check_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise EnvError(f"action shape {a.shape} != ({self.spec.action_dim},)")
        if not np.all(np.isfinite(a)):
            raise EnvError(f"non-finite action {a}")
        low, high = np.asarray(self.spec.action_low), np.asarray(self.spec.action_high)
        if np.any(a < low) or np.any(a > high):
            logger.debug("clamping action %s to [%s, %s]", a, low, high)
            a = np.clip(a, low, high)
        return a

    def step(self, a) -> Tuple[np.ndarray, float, bool]:
        if self._obs is None:
            raise EnvError("environment must be reset before stepping")
        a = self._check_action(a)
        r = float(self.reward(self._obs, a))
        self._obs = np.asarray(self.dynamics(self._obs, a), dtype=np.float64)
        self.t += 1
        return self._obs.copy(), r, self.t >= self.spec.horizon

    def oracle_dynamics(self, s, a) -> np.ndarray:
        """True next observation; never touches the environment's own state."""
        return np.asarray(self.dynamics(np.asarray(s, dtype=np.float64),
                                        self._check_action(a)), dtype=np.float64)

    def oracle_reward(self, s, a) -> float:
        return float(self.reward(np.asarray(s, dtype=np.float64), self._check_action(a)))


class PendulumEnv(Env):
    """Torque-limited pendulum swing-up; angle 0 is upright.

    Observation is ``(cos θ, sin θ, ω)``; the angle is recovered with ``atan2``
    so it is always wrapped to ``(-π, π]``.
    """

    def __init__(self, g: float = 10.0, m: float = 1.0, l: float = 1.0, dt: float = 0.05,
                 max_torque: float = 2.0, max_speed: float = 8.0, horizon: int = 200):
        super().__init__()
        self.g, self.m, self.l = g, m, l
        self.max_torque, self.max_speed = max_torque, max_speed
        self.spec = EnvSpec("pendulum", 3, 1, horizon, (-max_torque,), (max_torque,), dt, (0, 1))

    @staticmethod
    def observe(theta, omega) -> np.ndarray:
        return np.array([math.cos(theta), math.sin(theta), omega])

    def _sample_initial(self, rng):
        theta = rng.uniform(-math.pi, math.pi)
        omega = rng.uniform(-1.0, 1.0)
        return self.observe(theta, omega)

    def set_state(self, theta: float, omega: float) -> np.ndarray:
        self._obs = self.observe(theta, omega)
        self.t = 0
        return self._obs.copy()

    @property
    def theta(self) -> float:
        o = self.observation
        return math.atan2(o[1], o[0])

    def dynamics(self, s, a):
        """Semi-implicit Euler step; works on arrays ``(..., 3)`` or tape nodes."""
        dt = self.spec.dt
        c, sn, w = s[..., 0:1], s[..., 1:2], s[..., 2:3]
        u = ad.clip(a, -self.max_torque, self.max_torque)
        theta = ad.atan2(sn, c)
        accel = ad.add(ad.scale(sn, 3.0 * self.g / (2.0 * self.l)),
                       ad.scale(u, 3.0 / (self.m * self.l ** 2)))
        w_new = ad.add(w, ad.scale(accel, dt))
        theta_new = ad.add(theta, ad.scale(w_new, dt))
        w_new = ad.clip(w_new, -self.max_speed, self.max_speed)
        return ad.concat([ad.cos(theta_new), ad.sin(theta_new), w_new], axis=-1)

    def reward(self, s, a):
        c, sn, w = s[..., 0:1], s[..., 1:2], s[..., 2:3]
        u = ad.clip(a, -self.max_torque, self.max_torque)
        theta = ad.atan2(sn, c)
        cost = ad.add(ad.add(ad.square(theta), ad.scale(ad.square(w), 0.1)),
                      ad.scale(ad.square(u), 0.001))
        r = ad.scale(cost, -1.0)
        return r[..., 0] if ad.value_of(r).ndim == 1 else r

    def energy(self, s=None) -> float:
        """``ω²/2 + (3g/2l) cos θ``, conserved by the continuous unforced dynamics."""
        s = self.observation if s is None else s
        return 0.5 * s[2] ** 2 + 1.5 * self.g / self.l * s[0]

    @property
    def reward_bound(self) -> float:
        return math.pi ** 2 + 0.1 * self.max_speed ** 2 + 0.001 * self.max_torque ** 2


class Linear2DEnv(Env):
    """Point mass on a line: state ``(x, v)``, force input, quadratic cost.

    ``s' = A s + B a`` and ``r = -(sᵀ Q s + r_a a²)``; actions are unbounded.
    """

    def __init__(self, dt: float = 0.1, action_cost: float = 0.1, horizon: int = 100):
        super().__init__()
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt * dt], [dt]])
        self.Q = np.eye(2)
        self.R = np.array([[action_cost]])
        self.spec = EnvSpec("linear2d", 2, 1, horizon, (-math.inf,), (math.inf,), dt, None)

    def _sample_initial(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def dynamics(self, s, a):
        return ad.add(ad.matmul(s, self.A.T), ad.matmul(a, self.B.T))

    def reward(self, s, a):
        qs = ad.sum_(ad.mul(ad.matmul(s, self.Q), s), axis=-1, keepdims=True)
        ra = ad.sum_(ad.mul(ad.matmul(a, self.R), a), axis=-1, keepdims=True)
        r = ad.scale(ad.add(qs, ra), -1.0)
        return r[..., 0] if ad.value_of(r).ndim == 1 else r

    def affine_policy_value(self, K, k0, s0, horizon: int, gamma: float) -> float:
        """Closed-form return of ``a = K s + k0`` via a backward matrix recursion.

        With the augmented state ``z = (s, 1)`` the closed loop is ``z' = M z``
        and the per-step cost is ``zᵀ C z``, so the value is ``-z0ᵀ P_0 z0``
        where ``P_H = C`` and ``P_t = C + γ Mᵀ P_{t+1} M``.
        """
        K = np.asarray(K, dtype=np.float64).reshape(1, 2)
        k0 = np.asarray(k0, dtype=np.float64).reshape(1)
        M = np.zeros((3, 3))
        M[:2, :2] = self.A + self.B @ K
        M[:2, 2] = (self.B @ k0).reshape(2)
        M[2, 2] = 1.0
        L = np.concatenate([K, k0[:, None]], axis=1)  # a = L z
        C = np.zeros((3, 3))
        C[:2, :2] = self.Q
        C += L.T @ self.R @ L
        P = C.copy()
        for _ in range(horizon):
            P = C + gamma * M.T @ P @ M
        z0 = np.append(np.asarray(s0, dtype=np.float64), 1.0)
        return float(-z0 @ P @ z0)


ENVIRONMENTS = {"pendulum": PendulumEnv, "linear2d": Linear2DEnv}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def reset(env: Env, rng: np.random.Generator) -> np.ndarray:
    return env.reset(rng)


def step(env: Env, a):
    return env.step(a)


def oracle_dynamics(env: Env, s, a) -> np.ndarray:
    return env.oracle_dynamics(s, a)
