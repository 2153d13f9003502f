"""Online-bootstrapped replay storage with linearly weighted sampling.

Transitions are stored once, column-wise, in a :class:`TransitionStore`. The
master dataset and every bootstrap replica are :class:`BootstrapBuffer`
objects that only hold a multiplicity count per global example; the master
dataset's counts are all one. Sampling draws global example ``i`` (1-based)
with probability proportional to ``w(t, i) * count(i)``, where ``w`` is either
uniform or the linear weight ``w(t, i) = i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

EXP_MINUS_ONE = math.exp(-1.0)
MAX_REJECTION_ROUNDS = 32


class EmptyBufferError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    """One experienced step ``(s, a, s', r)``; array fields are read-only."""

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float

    def __post_init__(self):
        for name in ("state", "action", "next_state"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "reward", float(self.reward))
        if not (all(np.isfinite(getattr(self, n)).all() for n in ("state", "action", "next_state"))
                and math.isfinite(self.reward)):
            raise ValueError("transition contains non-finite values")


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    indices: np.ndarray  # 0-based global indices


# --- Poisson(1) ---------------------------------------------------------------


def poisson1(rng: np.random.Generator, size: Optional[int] = None):
    """Poisson(1) draw(s) by Knuth's product-of-uniforms method."""
    if size is None:
        k = 0
        p = rng.random()
        while p >= EXP_MINUS_ONE:
            p *= rng.random()
            k += 1
        return k
    k = np.zeros(size, dtype=np.int64)
    p = rng.random(size)
    active = p >= EXP_MINUS_ONE
    while active.any():
        idx = np.flatnonzero(active)
        p[idx] *= rng.random(idx.size)
        k[idx] += 1
        active[idx] = p[idx] >= EXP_MINUS_ONE
    return k


# --- weights and the closed-form inverse CDF -----------------------------------


@dataclass(frozen=True)
class SamplerWeights:
    scheme: str = "linear"

    def __post_init__(self):
        if self.scheme not in ("uniform", "linear"):
            raise ValueError(f"unknown sampling scheme {self.scheme!r}")

    def total(self, t: int) -> float:
        return t * (t + 1) / 2.0 if self.scheme == "linear" else float(t)

    def weights(self, t: int) -> np.ndarray:
        return np.arange(1, t + 1, dtype=np.float64) if self.scheme == "linear" else np.ones(t)


def linear_inverse_cdf(u, t: int):
    """Smallest ``i`` in ``1..t`` with ``i (i + 1) / 2 > u``.

    Accepts a scalar or an array of ``u`` in ``[0, t (t + 1) / 2)``.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    total = t * (t + 1) / 2.0
    if np.any(u_arr < 0) or np.any(u_arr >= total):
        raise ValueError(f"u must lie in [0, {total}) for t={t}")
    i = np.floor((np.sqrt(8.0 * u_arr + 1.0) - 1.0) / 2.0).astype(np.int64) + 1
    # integer correction for rounding in the square root
    i = np.where(i * (i + 1) / 2.0 <= u_arr, i + 1, i)
    i = np.where((i - 1) * i / 2.0 > u_arr, i - 1, i)
    i = np.clip(i, 1, t)
    return int(i) if np.ndim(u) == 0 else i


def expected_count_oracle(i: int, t: int, scheme: str = "linear") -> float:
    """Expected number of selections of example ``i`` over steps ``i..t``.

    One draw per step; at step ``k`` the dataset holds ``k`` examples. Uses
    direct summation of the per-step selection probabilities.
    """
    if not 1 <= i <= t:
        raise ValueError(f"need 1 <= i <= t, got i={i}, t={t}")
    k = np.arange(i, t + 1, dtype=np.float64)
    if scheme == "uniform":
        return float(np.sum(1.0 / k))
    if scheme == "linear":
        return float(np.sum(2.0 * i / (k * (k + 1.0))))
    raise ValueError(f"unknown scheme {scheme!r}")


def selection_variance(i: int, t: int, scheme: str = "linear") -> float:
    """Variance of the cumulative selection count (sum of independent Bernoullis)."""
    k = np.arange(i, t + 1, dtype=np.float64)
    p = 1.0 / k if scheme == "uniform" else 2.0 * i / (k * (k + 1.0))
    return float(np.sum(p * (1.0 - p)))


# --- storage -------------------------------------------------------------------


class TransitionStore:
    """Append-only columnar storage with amortised O(1) growth."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1024):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.size = 0
        self._s = np.empty((capacity, state_dim))
        self._a = np.empty((capacity, action_dim))
        self._s2 = np.empty((capacity, state_dim))
        self._r = np.empty(capacity)

    def _grow(self):
        cap = 2 * self._r.size
        for name in ("_s", "_a", "_s2", "_r"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:])
            new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def append(self, x: Transition) -> int:
        if x.state.shape != (self.state_dim,) or x.next_state.shape != (self.state_dim,) \
                or x.action.shape != (self.action_dim,):
            raise ValueError(
                f"transition shapes s{x.state.shape} a{x.action.shape} s'{x.next_state.shape} "
                f"do not match state_dim={self.state_dim}, action_dim={self.action_dim}")
        if self.size == self._r.size:
            self._grow()
        j = self.size
        self._s[j], self._a[j], self._s2[j], self._r[j] = x.state, x.action, x.next_state, x.reward
        self.size += 1
        return j

    def __len__(self):
        return self.size

    def __getitem__(self, j: int) -> Transition:
        if not 0 <= j < self.size:
            raise IndexError(j)
        return Transition(self._s[j], self._a[j], self._s2[j], self._r[j])

    def gather(self, idx: np.ndarray) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self._s[idx], self._a[idx], self._s2[idx], self._r[idx], idx)

    @property
    def states(self):
        return self._s[: self.size]

    @property
    def actions(self):
        return self._a[: self.size]

    @property
    def next_states(self):
        return self._s2[: self.size]

    @property
    def rewards(self):
        return self._r[: self.size]


class BootstrapBuffer:
    """Multiplicity counts over the global example sequence ``1..t``."""

    def __init__(self, capacity: int = 1024):
        self._counts = np.zeros(capacity, dtype=np.int64)
        self.clock = 0
        self.max_count = 0
        self.total_count = 0

    def append(self, count: int) -> None:
        if count < 0:
            raise ValueError("multiplicity must be non-negative")
        if self.clock == self._counts.size:
            grown = np.zeros(2 * self._counts.size, dtype=np.int64)
            grown[: self.clock] = self._counts[: self.clock]
            self._counts = grown
        self._counts[self.clock] = count
        self.clock += 1
        self.total_count += count
        self.max_count = max(self.max_count, count)

    @property
    def counts(self) -> np.ndarray:
        return self._counts[: self.clock]

    def __len__(self):
        return self.clock

    @property
    def entries(self) -> np.ndarray:
        """1-based global indices stored with non-zero multiplicity."""
        return np.flatnonzero(self.counts) + 1


def sample_indices(buffer: BootstrapBuffer, weights: SamplerWeights, m: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` 0-based global indices with probability ``∝ w(t,i)·count(i)``.

    Proposals come from the closed-form inverse CDF of ``w``; each is accepted
    with probability ``count(i) / max_count``. Draws still pending after
    ``MAX_REJECTION_ROUNDS`` rounds fall back to an exact prefix-sum search.
    """
    t = buffer.clock
    if buffer.total_count == 0:
        raise EmptyBufferError("cannot sample from a buffer with no positive counts")
    counts = buffer.counts
    out = np.empty(m, dtype=np.int64)
    pending = np.arange(m)
    total_w = weights.total(t)
    exact = buffer.max_count == 1 and buffer.total_count == t
    # proposals per pending draw, sized by the expected acceptance rate
    rate = buffer.total_count / (t * buffer.max_count)
    per_draw = 1 if exact else int(min(32, np.ceil(1.5 / rate)))
    for _ in range(MAX_REJECTION_ROUNDS):
        n = pending.size
        if n == 0:
            return out
        u = rng.random(n * per_draw) * total_w
        if weights.scheme == "linear":
            i = linear_inverse_cdf(u, t) - 1
        else:
            i = np.minimum(u.astype(np.int64), t - 1)
        if exact:
            accept = np.ones(i.size, dtype=bool)
        else:
            accept = rng.random(i.size) * buffer.max_count < counts[i]
        got = i[accept][:n]
        out[pending[:got.size]] = got
        pending = pending[got.size:]
    if pending.size:
        cum = np.cumsum(weights.weights(t) * counts)
        u = rng.random(pending.size) * cum[-1]
        out[pending] = np.searchsorted(cum, u, side="right")
    return out


class BootstrapReplay:
    """Master dataset plus ``n_buffers`` online bootstrap replicas."""

    def __init__(self, state_dim: int, action_dim: int, n_buffers: int, scheme: str = "linear"):
        self.store = TransitionStore(state_dim, action_dim)
        self.master = BootstrapBuffer()
        self.buffers: List[BootstrapBuffer] = [BootstrapBuffer() for _ in range(n_buffers)]
        self.weights = SamplerWeights(scheme)

    def __len__(self):
        return len(self.store)

    @property
    def clock(self) -> int:
        return self.master.clock

    def push(self, x: Transition, rng: np.random.Generator) -> np.ndarray:
        """Record ``x`` once with count 1 in the master dataset and a Poisson(1)
        multiplicity in every replica; returns the replica multiplicities."""
        self.store.append(x)
        self.master.append(1)
        z = np.array([poisson1(rng) for _ in self.buffers], dtype=np.int64)
        for buf, zk in zip(self.buffers, z):
            buf.append(int(zk))
        return z

    def sample_minibatch(self, k: Optional[int], m: int, rng: np.random.Generator) -> Batch:
        """Minibatch from replica ``k`` (``None`` selects the master dataset)."""
        buf = self.master if k is None else self.buffers[k]
        return self.store.gather(sample_indices(buf, self.weights, m, rng))

    def save(self, path) -> None:
        """Columnar snapshot: one ``.npz`` holding every field plus all replica counts."""
        np.savez(
            path,
            format_version=np.array(1),
            scheme=np.array(self.weights.scheme),
            states=self.store.states, actions=self.store.actions,
            next_states=self.store.next_states, rewards=self.store.rewards,
            counts=np.stack([b.counts for b in self.buffers]) if self.buffers else np.zeros((0, len(self))),
        )

    @classmethod
    def load(cls, path) -> "BootstrapReplay":
        with np.load(Path(path), allow_pickle=False) as z:
            states, actions = z["states"], z["actions"]
            replay = cls(states.shape[1], actions.shape[1], z["counts"].shape[0], str(z["scheme"]))
            for j in range(states.shape[0]):
                replay.store.append(Transition(states[j], actions[j], z["next_states"][j], z["rewards"][j]))
                replay.master.append(1)
                for buf, c in zip(replay.buffers, z["counts"][:, j]):
                    buf.append(int(c))
        return replay


def push(replay: BootstrapReplay, x: Transition, rng: np.random.Generator) -> np.ndarray:
    return replay.push(x, rng)


def sample_minibatch(buffer: BootstrapBuffer, store: TransitionStore, weights: SamplerWeights,
                     m: int, rng: np.random.Generator) -> List[Transition]:
    """List-of-transitions form of :func:`sample_indices`."""
    return [store[int(j)] for j in sample_indices(buffer, weights, m, rng)]


def simulate_cumulative_counts(t: int, replications: int, scheme: str,
                               rng: np.random.Generator, probes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Monte-Carlo selection counts with one draw per step from a growing dataset.

    Returns an array ``(replications, len(probes))`` of how often each probe
    (1-based) example was selected by the end of step ``t``; with ``probes=None``
    every example is tracked and the array is ``(replications, t)``.
    """
    picks = np.empty((t, replications), dtype=np.int64)
    for k in range(1, t + 1):
        u = rng.random(replications)
        if scheme == "linear":
            picks[k - 1] = linear_inverse_cdf(u * (k * (k + 1) / 2.0), k)
        else:
            picks[k - 1] = np.minimum((u * k).astype(np.int64), k - 1) + 1
    flat = np.arange(replications)[None, :] * t + (picks - 1)
    counts = np.bincount(flat.ravel(), minlength=replications * t).reshape(replications, t)
    if probes is None:
        return counts
    return counts[:, np.asarray(probes, dtype=np.int64) - 1]
