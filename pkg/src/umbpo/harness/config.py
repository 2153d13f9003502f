"""TOML run configuration: schema with a default for every key, validation that
names the offending key and line, and a frozen copy written next to results.

Schema (section.key: type = default) is the ``SCHEMA`` table below; the
README renders it as a reference.
"""
from __future__ import annotations

import copy
import re
import sys
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..agent import MBPOAgent
from ..models import DynamicsEnsemble, RewardModel
from ..policy import DeterministicPolicy

_OPT = ("sgd", "adam")
_ACT = ("tanh", "relu")

# section -> key -> (type, default, allowed values or None)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "env": {
        "name": (str, "pendulum", ("pendulum", "linear2d")),
    },
    "dynamics": {
        "n_members": (int, 5, None),
        "hidden_sizes": (list, [64, 64], None),
        "activation": (str, "tanh", _ACT),
        "optimizer": (str, "sgd", _OPT),
        "learning_rate": (float, 1e-3, None),
        "momentum": (float, 0.0, None),
        "batch_size": (int, 32, None),
        "grad_steps": (int, 4, None),
        "normalize_inputs": (bool, True, None),
        "normalize_targets": (bool, True, None),
    },
    "reward": {
        "hidden_sizes": (list, [64, 64], None),
        "activation": (str, "tanh", _ACT),
        "optimizer": (str, "sgd", _OPT),
        "learning_rate": (float, 1e-3, None),
        "momentum": (float, 0.0, None),
        "batch_size": (int, 32, None),
        "grad_steps": (int, 4, None),
        "normalize_inputs": (bool, True, None),
        "normalize_targets": (bool, True, None),
    },
    "policy": {
        "hidden_sizes": (list, [32, 32], None),
        "activation": (str, "tanh", _ACT),
        "optimizer": (str, "sgd", _OPT),
        "learning_rate": (float, 1e-3, None),
        "momentum": (float, 0.0, None),
        "max_grad_norm": (float, 10.0, None),
    },
    "rollout": {
        "horizon": (int, 15, None),
        "gamma": (float, 0.99, None),
        "risk": (float, 0.5, None),
        "n_starts": (int, 8, None),
        "variance": (str, "population", ("population", "sample")),
        "project_unit_circle": (bool, True, None),
    },
    "agent": {
        "seed": (int, 0, None),
        "total_steps": (int, 6000, None),
        "sampling": (str, "linear", ("linear", "uniform")),
        "policy_updates": (int, 1, None),
        "exploration_noise": (float, 0.0, None),
        "eval_episodes": (int, 20, None),
        "eval_every": (int, 0, None),  # 0: once per task episode
        "on_error": (str, "skip", ("skip", "abort")),
        "warm_start_data": (str, "", None),
        "warm_start_policy": (str, "", None),
        "pretrain_steps": (int, 0, None),
    },
    "error_analysis": {
        "n_transitions": (int, 2000, None),
        "train_steps": (int, 3000, None),
        "n_probes": (int, 200, None),
        "horizons": (list, [1, 5, 10, 20, 40], None),
        "probe_policy_scale": (float, 1.0, None),
        "segment_length": (int, 50, None),
        "seed": (int, 0, None),
    },
}

POSITIVE = {("dynamics", "n_members"): 2, ("dynamics", "batch_size"): 1, ("reward", "batch_size"): 1,
            ("rollout", "horizon"): 1, ("rollout", "n_starts"): 1, ("agent", "policy_updates"): 1,
            ("error_analysis", "n_probes"): 1, ("error_analysis", "n_transitions"): 1,
            ("error_analysis", "segment_length"): 1}
RATES = {("dynamics", "learning_rate"), ("reward", "learning_rate"), ("policy", "learning_rate")}


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None,
                 path: Optional[str] = None):
        self.key, self.line, self.path = key, line, path
        where = ":".join(str(x) for x in (path, line) if x is not None)
        super().__init__(f"{where + ': ' if where else ''}{message}")


def defaults() -> Dict[str, Dict[str, Any]]:
    return {sec: {k: copy.deepcopy(spec[1]) for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def _key_line(text: str, section: str, key: Optional[str]) -> Optional[int]:
    """1-based line of ``key`` inside ``[section]`` (or of the section header)."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
    for n, raw in enumerate(text.splitlines(), 1):
        m = header.match(raw)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
            return n
    return None


def _coerce(section: str, key: str, value, line, path):
    typ, _, allowed = SCHEMA[section][key]
    name = f"{section}.{key}"
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{name} must be of type {typ.__name__}, got {value!r}", name, line, path)
    if typ is list:
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in value):
            raise ConfigError(f"{name} must be a list of non-negative integers, got {value!r}", name, line, path)
    if allowed is not None and value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}", name, line, path)
    lo = POSITIVE.get((section, key))
    if lo is not None and value < lo:
        raise ConfigError(f"{name} must be >= {lo}, got {value!r}", name, line, path)
    if (section, key) in RATES and not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value!r}", name, line, path)
    if name == "rollout.gamma" and not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {value!r}", name, line, path)
    if typ is int and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value!r}", name, line, path)
    return value


def parse_config(text: str, path: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
    """Merge TOML ``text`` over the defaults; unknown or ill-typed keys raise ConfigError."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", None, int(m.group(1)) if m else None, path) from None
    cfg = defaults()
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section, _key_line(text, section, None), path)
        if not isinstance(body, dict):
            raise ConfigError(f"{section} must be a table", section, _key_line(text, section, None), path)
        for key, value in body.items():
            line = _key_line(text, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}", line, path)
            cfg[section][key] = _coerce(section, key, value, line, path)
    return cfg


def load_config(path) -> Dict[str, Dict[str, Any]]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}", None, None, str(p)) from None
    return parse_config(text, str(p))


def dump_config(cfg: Dict[str, Dict[str, Any]]) -> str:
    return tomli_w.dumps(cfg)


def write_frozen(cfg: Dict[str, Dict[str, Any]], directory) -> Path:
    """Write the fully-resolved config (every key explicit) as ``config.toml``."""
    out = Path(directory) / "config.toml"
    out.write_text(dump_config(cfg))
    return out


def build_agent(cfg: Dict[str, Dict[str, Any]]) -> MBPOAgent:
    d, r, p, ro, a = (cfg[k] for k in ("dynamics", "reward", "policy", "rollout", "agent"))
    dynamics = DynamicsEnsemble(
        n_members=d["n_members"], hidden_sizes=tuple(d["hidden_sizes"]), activation=d["activation"],
        optimizer=d["optimizer"], learning_rate=d["learning_rate"], momentum=d["momentum"],
        batch_size=d["batch_size"], grad_steps=d["grad_steps"],
        normalize_inputs=d["normalize_inputs"], normalize_targets=d["normalize_targets"])
    reward = RewardModel(
        hidden_sizes=tuple(r["hidden_sizes"]), activation=r["activation"], optimizer=r["optimizer"],
        learning_rate=r["learning_rate"], momentum=r["momentum"], batch_size=r["batch_size"],
        grad_steps=r["grad_steps"], normalize_inputs=r["normalize_inputs"],
        normalize_targets=r["normalize_targets"])
    policy = DeterministicPolicy(
        hidden_sizes=tuple(p["hidden_sizes"]), activation=p["activation"], optimizer=p["optimizer"],
        learning_rate=p["learning_rate"], momentum=p["momentum"], max_grad_norm=p["max_grad_norm"])
    return MBPOAgent(
        env=cfg["env"]["name"], dynamics=dynamics, reward_model=reward, policy=policy,
        horizon=ro["horizon"], gamma=ro["gamma"], risk=ro["risk"], n_starts=ro["n_starts"],
        variance=ro["variance"], project_unit_circle=ro["project_unit_circle"],
        sampling=a["sampling"], policy_updates=a["policy_updates"],
        exploration_noise=a["exploration_noise"], total_steps=a["total_steps"],
        eval_episodes=a["eval_episodes"], eval_every=a["eval_every"] or None, seed=a["seed"],
        on_error=a["on_error"], warm_start_data=a["warm_start_data"] or None,
        warm_start_policy=a["warm_start_policy"] or None, pretrain_steps=a["pretrain_steps"])
