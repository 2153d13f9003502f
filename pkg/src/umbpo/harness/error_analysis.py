"""Compounding model error: how far a learned ensemble's value estimate drifts
from the true value as the rollout horizon grows.

Models are trained offline on data from random policies. Each probe pairs a start
state with a randomly initialised policy; one rollout to the largest horizon
gives every prefix return, which is compared with the oracle return of the
same policy under the true dynamics and reward.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from ..envs import Env, make_env
from ..models import DynamicsEnsemble, RewardModel
from ..policy import DeterministicPolicy
from ..replay import Transition
from ..rollout import TrueModel, project_unit_circle

logger = logging.getLogger(__name__)

COLUMNS = ("H", "one_step_mse", "value_mse_mean", "value_mse_std")


@dataclass
class ErrorCurve:
    horizons: np.ndarray
    one_step_mse: np.ndarray
    value_mse_mean: np.ndarray
    value_mse_std: np.ndarray

    def rows(self) -> List[Dict]:
        return [{"H": int(h), "one_step_mse": float(o), "value_mse_mean": float(m), "value_mse_std": float(s)}
                for h, o, m, s in zip(self.horizons, self.one_step_mse, self.value_mse_mean,
                                      self.value_mse_std)]

    @property
    def spearman(self) -> float:
        """Rank correlation of mean value error with horizon."""
        return float(spearmanr(self.horizons, self.value_mse_mean)[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(COLUMNS)
            for row in self.rows():
                w.writerow([row["H"]] + [repr(row[c]) for c in COLUMNS[1:]])


def read_error_curve(path) -> ErrorCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ErrorCurve(*(np.array([float(r[c]) for r in rows]) for c in COLUMNS))


def _require_oracle(env: Env) -> None:
    if not (hasattr(env, "dynamics") and hasattr(env, "reward")):
        raise ValueError(f"environment {type(env).__name__} has no oracle dynamics/reward")


def collect_policy_transitions(env: Env, n: int, rng: np.random.Generator, segment: int = 50,
                               hidden_sizes=(32, 32), policy_scale: float = 1.0):
    """Experience from randomly initialised deterministic policies, a fresh one
    every ``segment`` steps (the same family the probes are drawn from, so probe
    trajectories stay inside the training distribution)."""
    out = []
    while len(out) < n:
        policy = DeterministicPolicy(hidden_sizes=hidden_sizes, final_layer_scale=policy_scale)
        policy.initialize(env.spec.state_dim, env.spec.action_low, env.spec.action_high, rng)
        s = env.reset(rng)
        for _ in range(segment):
            a = policy.act(s)
            s2, r, done = env.step(a)
            out.append(Transition(s, a, s2, r))
            s = s2
            if done or len(out) == n:
                break
    return out


def train_models(env: Env, n_transitions: int, train_steps: int, rng: np.random.Generator,
                 dynamics: Optional[DynamicsEnsemble] = None, reward_model: Optional[RewardModel] = None,
                 segment: int = 50, hidden_sizes=(32, 32), policy_scale: float = 1.0):
    """Fit an ensemble and a reward model on random-policy experience."""
    data = collect_policy_transitions(env, n_transitions, rng, segment, hidden_sizes, policy_scale)
    S = np.stack([x.state for x in data])
    A = np.stack([x.action for x in data])
    S2 = np.stack([x.next_state for x in data])
    R = np.array([x.reward for x in data])
    dynamics = dynamics if dynamics is not None else DynamicsEnsemble(optimizer="adam")
    reward_model = reward_model if reward_model is not None else RewardModel(optimizer="adam")
    dynamics.fit(S, A, S2, rng, steps=train_steps)
    reward_model.fit(S, A, R, rng, steps=train_steps)
    return dynamics, reward_model


def probe_errors(env: Env, dynamics, reward_model, horizons: Sequence[int], n_probes: int,
                 rng: np.random.Generator, gamma: float = 0.99, project: bool = True,
                 policy_scale: float = 1.0, hidden_sizes=(32, 32)) -> ErrorCurve:
    _require_oracle(env)
    horizons = np.array(sorted(set(int(h) for h in horizons)))
    if horizons.size == 0 or horizons[0] < 0:
        raise ValueError("horizons must be a non-empty set of non-negative integers")
    H_max = int(horizons[-1])
    circle = env.spec.unit_circle if project else None
    B = dynamics.n_members
    value_err = np.zeros((n_probes, horizons.size))
    step_err = np.zeros((n_probes, max(H_max, 1)))

    for p in range(n_probes):
        s0 = env.reset(rng)
        policy = DeterministicPolicy(hidden_sizes=hidden_sizes, final_layer_scale=policy_scale)
        policy.initialize(env.spec.state_dim, env.spec.action_low, env.spec.action_high, rng)
        S = np.broadcast_to(s0, (B, 1, s0.size)).copy()  # model rollout, one row per member
        s = s0[None].copy()  # true rollout
        G_model = np.zeros(B)
        G_true = 0.0
        prefix_model = np.zeros(H_max + 1)
        prefix_true = np.zeros(H_max + 1)
        for t in range(H_max + 1):
            A_m = policy.forward(S)
            a = policy.forward(s)
            G_model = G_model + gamma ** t * np.asarray(reward_model.reward(S, A_m)).reshape(B)
            G_true = G_true + gamma ** t * float(np.asarray(env.reward(s, a)).reshape(-1)[0])
            prefix_model[t] = G_model.mean()
            prefix_true[t] = G_true
            if t < max(H_max, 1):
                # one-step error of every member on the true trajectory
                pred = dynamics.predict_all(np.broadcast_to(s, (B, 1, s.shape[-1])),
                                            np.broadcast_to(a, (B, 1, a.shape[-1])))
                step_err[p, t] = float(np.mean((pred[:, 0] - env.dynamics(s, a)[0]) ** 2))
            if t == H_max:
                break
            S = dynamics.predict_all(S, A_m)
            if circle is not None:
                S = project_unit_circle(S, circle)
            s = np.asarray(env.dynamics(s, a))
        value_err[p] = (prefix_model[horizons] - prefix_true[horizons]) ** 2

    one_step = np.array([step_err[:, :max(int(h), 1)].mean() for h in horizons])
    return ErrorCurve(horizons, one_step, value_err.mean(axis=0), value_err.std(axis=0))


def error_analysis(cfg: Dict, horizons: Optional[Sequence[int]] = None, perfect: bool = False) -> ErrorCurve:
    """Run the experiment described by a parsed config (see ``harness.config``)."""
    ea = cfg["error_analysis"]
    env = make_env(cfg["env"]["name"])
    _require_oracle(env)
    horizons = ea["horizons"] if horizons is None else horizons
    rng = np.random.default_rng(ea["seed"])
    if perfect:
        dynamics = reward_model = TrueModel(env, cfg["dynamics"]["n_members"])
    else:
        d, r = cfg["dynamics"], cfg["reward"]
        dynamics = DynamicsEnsemble(
            n_members=d["n_members"], hidden_sizes=tuple(d["hidden_sizes"]), activation=d["activation"],
            optimizer=d["optimizer"], learning_rate=d["learning_rate"], momentum=d["momentum"],
            batch_size=d["batch_size"], normalize_inputs=d["normalize_inputs"],
            normalize_targets=d["normalize_targets"])
        reward_model = RewardModel(
            hidden_sizes=tuple(r["hidden_sizes"]), activation=r["activation"], optimizer=r["optimizer"],
            learning_rate=r["learning_rate"], momentum=r["momentum"], batch_size=r["batch_size"],
            normalize_inputs=r["normalize_inputs"], normalize_targets=r["normalize_targets"])
        train_models(env, ea["n_transitions"], ea["train_steps"], rng, dynamics, reward_model,
                     segment=ea["segment_length"], hidden_sizes=tuple(cfg["policy"]["hidden_sizes"]),
                     policy_scale=ea["probe_policy_scale"])
    return probe_errors(env, dynamics, reward_model, horizons, ea["n_probes"], rng,
                        gamma=cfg["rollout"]["gamma"], project=cfg["rollout"]["project_unit_circle"],
                        policy_scale=ea["probe_policy_scale"],
                        hidden_sizes=tuple(cfg["policy"]["hidden_sizes"]))
