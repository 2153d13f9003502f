"""Learned world model: a bootstrapped dynamics ensemble and a reward network.

The ensemble keeps its members' parameters stacked along a leading axis of
size ``n_members`` (``W0`` has shape ``(B, in, out)``), so one batched forward
pass evaluates every member on its own inputs. Members never share data:
member ``k`` only sees minibatches drawn from bootstrap replica ``k``.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import autodiff as ad
from .optim import make_optimizer
from .params import ParamSet, init_mlp, mlp_forward
from .replay import BootstrapReplay, EmptyBufferError, Transition
from .validation import check_fitted, check_matrix

logger = logging.getLogger(__name__)


class RunningNormalizer:
    """Per-dimension running mean/variance (Welford / Chan batch merge)."""

    def __init__(self, dim: int, min_std: float = 1e-6):
        self.dim = dim
        self.min_std = min_std
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        n = x.shape[0]
        if n == 0:
            return
        bmean = x.mean(axis=0)
        bm2 = ((x - bmean) ** 2).sum(axis=0)
        total = self.count + n
        delta = bmean - self.mean
        self.mean = self.mean + delta * (n / total)
        self._m2 = self._m2 + bm2 + delta ** 2 * (self.count * n / total)
        self.count = total

    @property
    def var(self) -> np.ndarray:
        return self._m2 / self.count if self.count else np.zeros(self.dim)

    @property
    def std(self) -> np.ndarray:
        std = np.sqrt(self.var)
        return np.where(std < self.min_std, 1.0, std)

    @property
    def active(self) -> bool:
        return self.count >= 2

    def normalize(self, x):
        if not self.active:
            return x
        return ad.mul(ad.sub(x, self.mean), 1.0 / self.std)

    def denormalize(self, y):
        if not self.active:
            return y
        return ad.add(ad.mul(y, self.std), self.mean)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.copy(), "m2": self._m2.copy()}

    def load_state_dict(self, state: dict) -> None:
        self.count = int(state["count"])
        self.mean = np.array(state["mean"], dtype=np.float64)
        self._m2 = np.array(state["m2"], dtype=np.float64)


class IdentityNormalizer(RunningNormalizer):
    """Normalizer that never activates; used to train on pre-normalized data."""

    def update(self, x) -> None:
        pass

    @property
    def active(self) -> bool:
        return False


class _MLPRegressor(BaseEstimator, RegressorMixin):
    """Shared training machinery for the dynamics and reward networks."""

    _leading: tuple = ()

    def _build(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.arch_ = [in_dim, *self.hidden_sizes, out_dim]
        self.params_ = init_mlp(self.arch_, rng, leading=self._leading,
                                final_scale=self.final_layer_scale)
        self.input_norm_ = RunningNormalizer(in_dim) if self.normalize_inputs else IdentityNormalizer(in_dim)
        self.target_norm_ = RunningNormalizer(out_dim) if self.normalize_targets else IdentityNormalizer(out_dim)
        self.opt_ = make_optimizer(self.optimizer, self.learning_rate, self.momentum)
        self.n_updates_ = 0

    def _net(self, x, params=None):
        """Normalized-space network output for raw inputs ``x``."""
        params = self.params_ if params is None else params
        return mlp_forward(params, self.input_norm_.normalize(x), self.arch_, self.activation, check=False)

    def _train_step(self, X: np.ndarray, Y: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        """One optimizer step on mean squared error; returns per-model losses."""
        Xn = self.input_norm_.normalize(X)
        Yn = self.target_norm_.normalize(Y)
        tape = ad.Tape()
        P = self.params_.on_tape(tape)
        pred = mlp_forward(P, tape.constant(Xn), self.arch_, self.activation, check=False)
        err = ad.sum_(ad.square(ad.sub(pred, Yn)), axis=-1)
        losses = ad.mean(err, axis=-1)
        objective = losses if mask is None else ad.mul(losses, mask)
        grads = tape.backward(ad.sum_(objective))
        self.opt_.step(self.params_, grads)
        self.n_updates_ += 1
        return np.array(losses.value)


class DynamicsEnsemble(_MLPRegressor):
    """``n_members`` deterministic MLPs predicting the state change ``s' - s``.

    Parameters
    ----------
    n_members : int
        Ensemble size (at least 2).
    hidden_sizes : tuple of int
        Hidden layer widths shared by every member.
    optimizer : {"sgd", "adam"}
        Update rule; ``momentum`` only applies to ``"sgd"``.
    batch_size, grad_steps : int
        Minibatch size and gradient steps per :meth:`update` call.
    normalize_inputs, normalize_targets : bool
        Standardize ``(s, a)`` inputs and ``s' - s`` targets with running
        statistics.
    """

    def __init__(self, n_members: int = 5, hidden_sizes: Sequence[int] = (64, 64),
                 activation: str = "tanh", optimizer: str = "sgd", learning_rate: float = 1e-3,
                 momentum: float = 0.0, batch_size: int = 32, grad_steps: int = 4,
                 normalize_inputs: bool = True, normalize_targets: bool = True,
                 final_layer_scale: float = 1.0):
        self.n_members = n_members
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.grad_steps = grad_steps
        self.normalize_inputs = normalize_inputs
        self.normalize_targets = normalize_targets
        self.final_layer_scale = final_layer_scale

    def initialize(self, state_dim: int, action_dim: int, rng: np.random.Generator) -> "DynamicsEnsemble":
        if self.n_members < 2:
            raise ValueError("a dynamics ensemble needs at least 2 members")
        self._leading = (self.n_members,)
        self.state_dim_ = state_dim
        self.action_dim_ = action_dim
        self._build(state_dim + action_dim, state_dim, rng)
        self.last_batch_indices_ = None
        return self

    # -- prediction ------------------------------------------------------------

    def member_params(self, k: int) -> ParamSet:
        self._check_member(k)
        return ParamSet({name: v[k] for name, v in self.params_.items()})

    def set_member_params(self, k: int, params: ParamSet) -> None:
        self._check_member(k)
        for name in self.params_:
            self.params_[name][k] = params[name]

    def _check_member(self, k):
        check_fitted(self, "params_")
        if not 0 <= k < self.n_members:
            raise IndexError(f"member index {k} out of range for {self.n_members} members")

    def predict_next(self, k: int, s, a, params=None):
        """Member ``k``'s next-state prediction ``s + Δ̂``; ``s``/``a`` may be tape nodes.

        ``params`` overrides the member's parameters (arrays or nodes), e.g. to
        differentiate with respect to them.
        """
        if params is None:
            params = self.member_params(k)
        x = ad.concat([s, a], axis=-1)
        delta = self.target_norm_.denormalize(self._net(x, params))
        return ad.add(s, delta)

    def predict_all(self, S, A, params=None):
        """Batched prediction: ``S`` is ``(B, n, ds)``, ``A`` is ``(B, n, da)``."""
        x = ad.concat([S, A], axis=-1)
        delta = self.target_norm_.denormalize(self._net(x, params))
        return ad.add(S, delta)

    def predict(self, S, A):
        """Every member's prediction for shared inputs; returns ``(B, n, ds)``."""
        check_fitted(self, "params_")
        S = check_matrix(S, self.state_dim_, "states")
        A = check_matrix(A, self.action_dim_, "actions")
        B = self.n_members
        return self.predict_all(np.broadcast_to(S, (B,) + S.shape), np.broadcast_to(A, (B,) + A.shape))

    def disagreement(self, s, a) -> float:
        """Mean over state dimensions (and inputs) of the across-member std-dev."""
        preds = self.predict(s, a)
        # offsets from member 0 make identical members give exactly zero
        return float(np.mean(np.std(preds - preds[:1], axis=0)))

    def one_step_mse(self, S, A, S_next) -> np.ndarray:
        """Per-member mean of ``||s' - f̂_k(s, a)||²``."""
        preds = self.predict(S, A)
        return np.mean(np.sum((preds - np.asarray(S_next)[None]) ** 2, axis=-1), axis=-1)

    # -- learning --------------------------------------------------------------

    def observe(self, state, action, next_state) -> None:
        """Fold one transition into the running input/target statistics."""
        s = np.asarray(state, dtype=np.float64).reshape(-1, self.state_dim_)
        a = np.asarray(action, dtype=np.float64).reshape(-1, self.action_dim_)
        s2 = np.asarray(next_state, dtype=np.float64).reshape(-1, self.state_dim_)
        self.input_norm_.update(np.concatenate([s, a], axis=-1))
        self.target_norm_.update(s2 - s)

    def update(self, replay: BootstrapReplay, rng: np.random.Generator,
               steps: Optional[int] = None, batch_size: Optional[int] = None) -> np.ndarray:
        """Gradient steps for every member on its own replica; returns the last
        minibatch losses (NaN for members whose replica is still empty)."""
        check_fitted(self, "params_")
        steps = self.grad_steps if steps is None else steps
        m = self.batch_size if batch_size is None else batch_size
        B = self.n_members
        live = np.array([buf.total_count > 0 for buf in replay.buffers[:B]])
        losses = np.full(B, np.nan)
        if steps == 0 or not live.any():
            return losses
        if not live.all():
            logger.debug("skipping members with empty replicas: %s", np.flatnonzero(~live))
        mask = live.astype(np.float64)
        for _ in range(steps):
            idx = np.zeros((B, m), dtype=np.int64)
            for k in np.flatnonzero(live):
                idx[k] = replay.sample_minibatch(k, m, rng).indices
            self.last_batch_indices_ = np.where(live[:, None], idx, -1)
            batch = replay.store.gather(idx)
            X = np.concatenate([batch.states, batch.actions], axis=-1)
            Y = batch.next_states - batch.states
            step_losses = self._train_step(X, Y, None if live.all() else mask)
        losses[live] = step_losses[live]
        return losses

    def fit(self, states, actions, next_states, rng: Optional[np.random.Generator] = None,
            steps: int = 1000):
        """Offline fit: Poisson-bootstrap the given transitions, then train."""
        rng = np.random.default_rng(0) if rng is None else rng
        S = check_matrix(states, None, "states")
        A = check_matrix(actions, None, "actions")
        S2 = check_matrix(next_states, S.shape[1], "next_states")
        if not hasattr(self, "params_"):
            self.initialize(S.shape[1], A.shape[1], rng)
        replay = BootstrapReplay(S.shape[1], A.shape[1], self.n_members, "uniform")
        for s, a, s2 in zip(S, A, S2):
            replay.push(Transition(s, a, s2, 0.0), rng)
        self.observe(S, A, S2)
        self.loss_curve_ = [self.update(replay, rng, steps=1) for _ in range(steps)]
        return self

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k in range(self.n_members):
            self.member_params(k).save(directory / f"dyn_{k}.params", meta=self._meta())

    def _meta(self) -> dict:
        return {
            "kind": "dynamics", "arch": self.arch_, "activation": self.activation,
            "input_norm": {k: np.asarray(v).tolist() for k, v in self.input_norm_.state_dict().items()},
            "target_norm": {k: np.asarray(v).tolist() for k, v in self.target_norm_.state_dict().items()},
        }

    def load(self, directory, rng: Optional[np.random.Generator] = None) -> "DynamicsEnsemble":
        directory = Path(directory)
        first, meta = ParamSet.load(directory / "dyn_0.params", with_meta=True)
        arch = meta["arch"]
        self.hidden_sizes = tuple(arch[1:-1])
        self.activation = meta["activation"]
        self.initialize(arch[-1], arch[0] - arch[-1], rng or np.random.default_rng(0))
        for k in range(self.n_members):
            self.set_member_params(k, first if k == 0 else ParamSet.load(directory / f"dyn_{k}.params"))
        self.input_norm_.load_state_dict(meta["input_norm"])
        self.target_norm_.load_state_dict(meta["target_norm"])
        return self


class RewardModel(_MLPRegressor):
    """Deterministic MLP regression of the scalar reward on ``(s, a)``."""

    def __init__(self, hidden_sizes: Sequence[int] = (64, 64), activation: str = "tanh",
                 optimizer: str = "sgd", learning_rate: float = 1e-3, momentum: float = 0.0,
                 batch_size: int = 32, grad_steps: int = 4, normalize_inputs: bool = True,
                 normalize_targets: bool = True, final_layer_scale: float = 1.0):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.grad_steps = grad_steps
        self.normalize_inputs = normalize_inputs
        self.normalize_targets = normalize_targets
        self.final_layer_scale = final_layer_scale

    def initialize(self, state_dim: int, action_dim: int, rng: np.random.Generator) -> "RewardModel":
        self.state_dim_ = state_dim
        self.action_dim_ = action_dim
        self._build(state_dim + action_dim, 1, rng)
        return self

    def reward(self, s, a, params=None):
        """Predicted reward with a trailing singleton axis; tape-aware."""
        x = ad.concat([s, a], axis=-1)
        return self.target_norm_.denormalize(self._net(x, params))

    def predict(self, S, A) -> np.ndarray:
        check_fitted(self, "params_")
        S = check_matrix(S, self.state_dim_, "states")
        A = check_matrix(A, self.action_dim_, "actions")
        return np.asarray(self.reward(S, A))[:, 0]

    def observe(self, state, action, reward) -> None:
        s = np.asarray(state, dtype=np.float64).reshape(-1, self.state_dim_)
        a = np.asarray(action, dtype=np.float64).reshape(-1, self.action_dim_)
        self.input_norm_.update(np.concatenate([s, a], axis=-1))
        self.target_norm_.update(np.asarray(reward, dtype=np.float64).reshape(-1, 1))

    def update(self, replay: BootstrapReplay, rng: np.random.Generator,
               steps: Optional[int] = None, batch_size: Optional[int] = None) -> float:
        """Gradient steps on minibatches from the master dataset; returns the last loss."""
        check_fitted(self, "params_")
        steps = self.grad_steps if steps is None else steps
        m = self.batch_size if batch_size is None else batch_size
        if steps == 0:
            return float("nan")
        if replay.master.total_count == 0:
            raise EmptyBufferError("reward model update needs a non-empty master dataset")
        loss = np.nan
        for _ in range(steps):
            batch = replay.sample_minibatch(None, m, rng)
            X = np.concatenate([batch.states, batch.actions], axis=-1)
            loss = self._train_step(X, batch.rewards[:, None])
        return float(loss)

    def fit(self, states, actions, rewards, rng: Optional[np.random.Generator] = None,
            steps: int = 1000):
        rng = np.random.default_rng(0) if rng is None else rng
        S = check_matrix(states, None, "states")
        A = check_matrix(actions, None, "actions")
        r = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if not hasattr(self, "params_"):
            self.initialize(S.shape[1], A.shape[1], rng)
        replay = BootstrapReplay(S.shape[1], A.shape[1], 0, "uniform")
        for s, a, rr in zip(S, A, r):
            replay.push(Transition(s, a, s, rr), rng)
        self.observe(S, A, r)
        self.loss_curve_ = [self.update(replay, rng, steps=1) for _ in range(steps)]
        return self

    def save(self, path) -> None:
        meta = {
            "kind": "reward", "arch": self.arch_, "activation": self.activation,
            "state_dim": self.state_dim_, "action_dim": self.action_dim_,
            "input_norm": {k: np.asarray(v).tolist() for k, v in self.input_norm_.state_dict().items()},
            "target_norm": {k: np.asarray(v).tolist() for k, v in self.target_norm_.state_dict().items()},
        }
        self.params_.save(path, meta=meta)

    def load(self, path) -> "RewardModel":
        params, meta = ParamSet.load(path, with_meta=True)
        arch = meta["arch"]
        self.hidden_sizes = tuple(arch[1:-1])
        self.activation = meta["activation"]
        self.initialize(meta["state_dim"], meta["action_dim"], np.random.default_rng(0))
        self.params_ = params
        self.input_norm_.load_state_dict(meta["input_norm"])
        self.target_norm_.load_state_dict(meta["target_norm"])
        return self


def update_dynamics(ensemble: DynamicsEnsemble, replay: BootstrapReplay, m: int, steps: int,
                    lr: Optional[float], rng: np.random.Generator) -> np.ndarray:
    if lr is not None:
        ensemble.opt_.lr = lr
    return ensemble.update(replay, rng, steps=steps, batch_size=m)


def update_reward(model: RewardModel, replay: BootstrapReplay, m: int, steps: int,
                  lr: Optional[float], rng: np.random.Generator) -> float:
    if lr is not None:
        model.opt_.lr = lr
    return model.update(replay, rng, steps=steps, batch_size=m)


def ensemble_disagreement(ensemble: DynamicsEnsemble, s, a) -> float:
    return ensemble.disagreement(s, a)
