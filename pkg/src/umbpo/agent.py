"""The online training loop: act, bootstrap-push, fit models, evaluate utility, ascend.

:class:`MBPOAgent` is an sklearn-style estimator: constructor arguments are
hyperparameters (sub-estimators for the dynamics ensemble, reward model and
policy nest under ``get_params(deep=True)``), ``fit(env)`` runs training and
``predict(states)`` returns the learned policy's actions.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, clone

from .envs import Env, EnvError, make_env
from .models import DynamicsEnsemble, RewardModel
from .policy import DeterministicPolicy
from .replay import BootstrapReplay, Transition
from .rollout import RolloutConfig, RolloutDivergence, policy_gradient
from .validation import check_fitted

logger = logging.getLogger(__name__)

DATASET_FORMAT = "umbpo-transitions"
DATASET_VERSION = 1


@dataclass
class MetricRow:
    t: int
    episode: int
    dyn_loss: List[float]
    reward_loss: float
    mu: float
    sigma: float
    utility: float
    grad_norm: float
    eval_return: Optional[float] = None
    status: str = "ok"

    def as_dict(self) -> dict:
        d = asdict(self)
        losses = d.pop("dyn_loss")
        out = {"t": d.pop("t"), "episode": d.pop("episode")}
        out.update({f"dyn_loss_{k}": v for k, v in enumerate(losses)})
        out.update(d)
        return out


@dataclass
class TrainingRecord:
    rows: List[MetricRow] = field(default_factory=list)
    step_ms: List[float] = field(default_factory=list)
    eval_steps: List[int] = field(default_factory=list)
    eval_returns: List[float] = field(default_factory=list)


# --- transition datasets (warm start) ------------------------------------------


def save_transitions(path, transitions: Sequence[Transition], state_dim: int, action_dim: int) -> None:
    """Line-delimited JSON: a versioned header line, then one transition per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                             "state_dim": state_dim, "action_dim": action_dim}) + "\n")
        for x in transitions:
            fh.write(json.dumps({"s": x.state.tolist(), "a": x.action.tolist(),
                                 "s_next": x.next_state.tolist(), "r": x.reward}) + "\n")


def load_transitions(path, state_dim: int, action_dim: int) -> List[Transition]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        return []
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a transition dataset (header {header})")
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    if (header["state_dim"], header["action_dim"]) != (state_dim, action_dim):
        raise ValueError(
            f"{path}: dataset dims (state {header['state_dim']}, action {header['action_dim']}) "
            f"do not match environment (state {state_dim}, action {action_dim})")
    out = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        out.append(Transition(rec["s"], rec["a"], rec["s_next"], rec["r"]))
    return out


def collect_random_transitions(env: Env, n: int, rng: np.random.Generator) -> List[Transition]:
    """Uniform-random-action experience, resetting at the task horizon."""
    low = np.asarray(env.spec.action_low)
    high = np.asarray(env.spec.action_high)
    if not env.spec.bounded:
        low, high = -np.ones_like(low), np.ones_like(high)
    out = []
    s = env.reset(rng)
    for _ in range(n):
        a = rng.uniform(low, high)
        s2, r, done = env.step(a)
        out.append(Transition(s, a, s2, r))
        s = env.reset(rng) if done else s2
    return out


# --- evaluation -----------------------------------------------------------------


def evaluate(policy, env: Env, episodes: int, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
    """Undiscounted full-horizon returns of ``policy`` (anything with ``act``)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns = np.zeros(episodes)
    for ep in range(episodes):
        s = env.reset(rng)
        done = False
        while not done:
            s, r, done = env.step(policy.act(s))
            returns[ep] += r
    return float(returns.mean()), returns


class ConstantPolicy:
    """Always plays the same action (the zero-torque baseline)."""

    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64)

    def act(self, s):
        return self.action


class EnergyPumpingController:
    """Classical pendulum swing-up: pump energy toward the upright level, then
    hand over to a PD stabilizer near the top."""

    def __init__(self, max_torque: float = 2.0, g: float = 10.0, l: float = 1.0,
                 k_energy: float = 1.0, kp: float = 10.0, kd: float = 2.0, switch_angle: float = 0.5):
        self.max_torque = max_torque
        self.target_energy = 1.5 * g / l
        self.g_l = 1.5 * g / l
        self.k_energy, self.kp, self.kd, self.switch_angle = k_energy, kp, kd, switch_angle

    def act(self, s):
        c, sn, w = s
        theta = math.atan2(sn, c)
        if abs(theta) < self.switch_angle:
            u = -self.kp * theta - self.kd * w
        else:
            energy = 0.5 * w * w + self.g_l * c
            u = self.k_energy * (self.target_energy - energy) * np.sign(w if w != 0 else 1.0)
        return np.array([float(np.clip(u, -self.max_torque, self.max_torque))])


# --- the agent -------------------------------------------------------------------


class MBPOAgent(BaseEstimator):
    """Uncertainty-aware model-based policy optimization.

    Parameters
    ----------
    env : str
        Environment name used when ``fit`` is not handed an instance.
    dynamics, reward_model, policy : estimators or None
        Unfitted templates; defaults are used when ``None``.
    horizon, gamma, risk : rollout horizon H, discount γ, risk coefficient c.
    n_starts : number of start states per policy-gradient step.
    total_steps : environment steps performed by ``fit``.
    eval_episodes, eval_every : evaluation protocol (``eval_every=None`` means
        once per task episode; ``0`` disables evaluation).
    on_error : ``"skip"`` drops a policy update whose rollout diverged or whose
        gradient is non-finite; ``"abort"`` re-raises.
    """

    def __init__(self, env: str = "pendulum", dynamics=None, reward_model=None, policy=None,
                 horizon: int = 15, gamma: float = 0.99, risk: float = 0.5, n_starts: int = 8,
                 variance: str = "population", project_unit_circle: bool = True,
                 sampling: str = "linear", policy_updates: int = 1, exploration_noise: float = 0.0,
                 total_steps: int = 6000, eval_episodes: int = 20, eval_every: Optional[int] = None,
                 seed: int = 0, on_error: str = "skip", warm_start_data: Optional[str] = None,
                 warm_start_policy: Optional[str] = None, pretrain_steps: int = 0):
        self.env = env
        self.dynamics = dynamics
        self.reward_model = reward_model
        self.policy = policy
        self.horizon = horizon
        self.gamma = gamma
        self.risk = risk
        self.n_starts = n_starts
        self.variance = variance
        self.project_unit_circle = project_unit_circle
        self.sampling = sampling
        self.policy_updates = policy_updates
        self.exploration_noise = exploration_noise
        self.total_steps = total_steps
        self.eval_episodes = eval_episodes
        self.eval_every = eval_every
        self.seed = seed
        self.on_error = on_error
        self.warm_start_data = warm_start_data
        self.warm_start_policy = warm_start_policy
        self.pretrain_steps = pretrain_steps

    # -- setup -------------------------------------------------------------------

    def _validate_params(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_starts < 1 or self.total_steps < 0:
            raise ValueError("n_starts must be >= 1 and total_steps >= 0")
        if self.on_error not in ("skip", "abort"):
            raise ValueError("on_error must be 'skip' or 'abort'")

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(self.horizon, self.gamma, self.risk, self.n_starts, self.variance,
                             self.project_unit_circle)

    def initialize(self, env: Optional[Env] = None) -> "MBPOAgent":
        """Build fresh models, replay and seeded generators (and apply warm starts)."""
        self._validate_params()
        env = make_env(self.env) if env is None else env
        spec = env.spec
        self.env_ = env
        seeds = np.random.SeedSequence(self.seed).spawn(6)
        init_rng, self.env_rng_, self.boot_rng_, self.sample_rng_, eval_seed, self.noise_rng_ = (
            np.random.default_rng(s) for s in seeds)
        self.eval_seed_ = int(eval_seed.integers(2 ** 63))
        self.dynamics_ = clone(self.dynamics) if self.dynamics is not None else DynamicsEnsemble()
        self.reward_ = clone(self.reward_model) if self.reward_model is not None else RewardModel()
        self.policy_ = clone(self.policy) if self.policy is not None else DeterministicPolicy()
        self.dynamics_.initialize(spec.state_dim, spec.action_dim, init_rng)
        self.reward_.initialize(spec.state_dim, spec.action_dim, init_rng)
        self.policy_.initialize(spec.state_dim, spec.action_low, spec.action_high, init_rng)
        self.replay_ = BootstrapReplay(spec.state_dim, spec.action_dim, self.dynamics_.n_members,
                                       self.sampling)
        self.record_ = TrainingRecord()
        self.t_ = 0
        self.episode_ = 0
        self._obs = None
        if self.warm_start_data:
            data = load_transitions(self.warm_start_data, spec.state_dim, spec.action_dim)
            for x in data:
                self._push(x)
            if data and self.pretrain_steps:
                self.dynamics_.update(self.replay_, self.sample_rng_, steps=self.pretrain_steps)
                self.reward_.update(self.replay_, self.sample_rng_, steps=self.pretrain_steps)
        if self.warm_start_policy:
            loaded = DeterministicPolicy.load(self.warm_start_policy)
            if loaded.arch_ != self.policy_.arch_:
                raise ValueError(
                    f"policy file arch {loaded.arch_} does not match configured arch {self.policy_.arch_}")
            self.policy_.params_ = loaded.params_
        return self

    def _push(self, x: Transition) -> np.ndarray:
        z = self.replay_.push(x, self.boot_rng_)
        self.dynamics_.observe(x.state, x.action, x.next_state)
        self.reward_.observe(x.state, x.action, x.reward)
        return z

    # -- the loop ----------------------------------------------------------------

    def step(self, phase_hook: Optional[Callable[[int], None]] = None) -> MetricRow:
        """One iteration: act, push, update models, evaluate utility, improve policy."""
        hook = phase_hook or (lambda p: None)
        env = self.env_
        if self._obs is None:
            self._obs = env.reset(self.env_rng_)
        s = self._obs

        hook(1)
        a = self.policy_.act(s)
        if self.exploration_noise:
            a = a + self.exploration_noise * self.noise_rng_.standard_normal(a.shape)
        s2, r, done = env.step(a)
        a = np.clip(a, env.spec.action_low, env.spec.action_high)
        self.t_ += 1

        hook(2)
        self._push(Transition(s, a, s2, r))

        hook(3)
        dyn_loss = self.dynamics_.update(self.replay_, self.sample_rng_)
        rew_loss = self.reward_.update(self.replay_, self.sample_rng_)

        status = "ok"
        mu = sigma = U = grad_norm = float("nan")
        cfg = self.rollout_config()
        for _ in range(self.policy_updates):
            hook(4)
            starts = self.replay_.sample_minibatch(None, self.n_starts, self.sample_rng_).states
            try:
                U, grads, dist = policy_gradient(self.policy_, starts, cfg, self.dynamics_, self.reward_,
                                                 unit_circle=env.spec.unit_circle)
            except RolloutDivergence as exc:
                if self.on_error == "abort":
                    raise
                logger.warning("step %d: %s; policy update skipped", self.t_, exc)
                status = "diverged"
                hook(5)
                continue
            mu, sigma = float(np.mean(dist.mean)), float(np.mean(dist.std))
            hook(5)
            norm = self.policy_.improve(grads)
            if norm is None:
                if self.on_error == "abort":
                    raise FloatingPointError(f"step {self.t_}: non-finite policy gradient")
                status = "nonfinite_grad"
            else:
                grad_norm = norm

        row = MetricRow(self.t_, self.episode_, [float(x) for x in dyn_loss], float(rew_loss),
                        mu, sigma, float(U), float(grad_norm), None, status)
        self._obs = s2
        if done:
            self.episode_ += 1
            self._obs = None
        return row

    def _eval_due(self) -> bool:
        every = self.env_.spec.horizon if self.eval_every is None else self.eval_every
        return bool(every) and self.t_ % every == 0

    def evaluate_policy(self, episodes: Optional[int] = None) -> Tuple[float, np.ndarray]:
        """Evaluation episodes on a separate env instance with a fixed start-state stream."""
        check_fitted(self, "policy_")
        env = make_env(self.env_.spec.name) if self.env_.spec.name in ("pendulum", "linear2d") \
            else self.env_
        return evaluate(self.policy_, env, episodes or self.eval_episodes,
                        np.random.default_rng(self.eval_seed_))

    def fit(self, env: Optional[Env] = None, n_steps: Optional[int] = None,
            callback: Optional[Callable[[MetricRow], None]] = None,
            phase_hook: Optional[Callable[[int], None]] = None) -> "MBPOAgent":
        if not hasattr(self, "replay_") or env is not None:
            self.initialize(env)
        n_steps = self.total_steps if n_steps is None else n_steps
        for _ in range(n_steps):
            t0 = time.perf_counter()
            try:
                row = self.step(phase_hook)
            except EnvError:
                logger.error("environment error at step %d; aborting run", self.t_ + 1)
                raise
            self.record_.step_ms.append((time.perf_counter() - t0) * 1000.0)
            if self._eval_due() and self.eval_episodes:
                mean_ret, _ = self.evaluate_policy()
                row.eval_return = mean_ret
                self.record_.eval_steps.append(self.t_)
                self.record_.eval_returns.append(mean_ret)
                logger.info("t=%d episode=%d eval=%.1f", self.t_, self.episode_, mean_ret)
            self.record_.rows.append(row)
            if callback is not None:
                callback(row)
        return self

    def predict(self, X) -> np.ndarray:
        check_fitted(self, "policy_")
        return self.policy_.predict(X)

    def score(self, env: Optional[Env] = None, episodes: Optional[int] = None) -> float:
        return self.evaluate_policy(episodes)[0]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.policy_.save(directory / "policy.params")
        self.dynamics_.save(directory)
        self.reward_.save(directory / "reward.params")


def warm_start(agent: MBPOAgent, dataset_file: Optional[str] = None,
               policy_file: Optional[str] = None, pretrain_steps: Optional[int] = None) -> MBPOAgent:
    """Point ``agent`` at off-policy data and/or a saved policy, then initialize it."""
    agent.set_params(warm_start_data=dataset_file, warm_start_policy=policy_file)
    if pretrain_steps is not None:
        agent.set_params(pretrain_steps=pretrain_steps)
    return agent.initialize()


def run(agent: MBPOAgent, env: Optional[Env] = None, callback=None) -> TrainingRecord:
    """Train ``agent`` for its configured number of steps and return the record."""
    agent.fit(env, callback=callback)
    return agent.record_
