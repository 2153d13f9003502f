import math
import re

import numpy as np
import pytest

from umbpo.envs import PendulumEnv
from umbpo.harness import cli
from umbpo.harness.config import ConfigError, build_agent, defaults, dump_config, load_config, parse_config
from umbpo.harness.error_analysis import ErrorCurve, error_analysis, probe_errors, read_error_curve
from umbpo.harness.metrics import (
    MetricsWriter, SCHEMA_VERSION, eval_curve, metric_columns, read_metrics, read_timings, write_metrics,
    write_timings,
)
from umbpo.harness.plot import PlotError, band, plot_metrics
from umbpo.models import DynamicsEnsemble, RewardModel
from umbpo.policy import DeterministicPolicy
from umbpo.rollout import TrueModel

PENDULUM = "configs/pendulum.toml"
LINEAR = "configs/linear2d.toml"


# --- config -----------------------------------------------------------------------


def test_every_key_has_a_default_and_round_trips():
    cfg = defaults()
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg["rollout"]["horizon"] == 15 and cfg["dynamics"]["n_members"] == 5
    assert cfg["error_analysis"]["horizons"] == [1, 5, 10, 20, 40]


def test_shipped_configs_parse():
    cfg = load_config(PENDULUM)
    assert cfg["rollout"]["risk"] == 0.5 and cfg["rollout"]["gamma"] == 0.99
    assert load_config(LINEAR)["env"]["name"] == "linear2d"


@pytest.mark.parametrize("text,key,line", [
    ("[rollout]\nhorizon = 0\n", "rollout.horizon", 2),
    ("[rollout]\n\ngamma = 1.0\n", "rollout.gamma", 3),
    ("[policy]\nlearning_rate = -1e-3\n", "policy.learning_rate", 2),
    ("[agent]\nseed = 0\nsamplng = 'linear'\n", "agent.samplng", 3),
    ("[dynamics]\nn_members = 1\n", "dynamics.n_members", 2),
    ("[dynamics]\nactivation = 'gelu'\n", "dynamics.activation", 2),
    ("[rollout]\nhorizon = 'ten'\n", "rollout.horizon", 2),
])
def test_config_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.toml")
    assert exc.value.key == key and exc.value.line == line
    assert f"run.toml:{line}" in str(exc.value)


def test_unknown_section():
    with pytest.raises(ConfigError) as exc:
        parse_config("[world]\nx = 1\n")
    assert exc.value.line == 1


def test_build_agent_uses_config_values():
    agent = build_agent(load_config(PENDULUM))
    assert agent.horizon == 15 and agent.risk == 0.5
    assert agent.dynamics.n_members == 5 and agent.policy.optimizer == "adam"


# --- metrics ----------------------------------------------------------------------


def _rows(n=6, members=2):
    rng = np.random.default_rng(0)
    out = []
    for t in range(1, n + 1):
        row = {"t": t, "episode": (t - 1) // 3, "reward_loss": float(rng.random()), "mu": -1.0 / 3,
               "sigma": 1e-300, "utility": float(rng.normal()), "grad_norm": math.pi,
               "eval_return": -123.456789012345 if t % 3 == 0 else None, "status": "ok"}
        for k in range(members):
            row[f"dyn_loss_{k}"] = float(rng.random()) * 10 ** -k
        out.append(row)
    return out


def test_metrics_round_trip_is_exact(tmp_path):
    rows = _rows()
    path = tmp_path / "metrics.csv"
    write_metrics(path, rows, 2)
    back = read_metrics(path)
    assert [{k: v for k, v in r.items() if k != "schema"} for r in back] == rows
    assert all(r["schema"] == SCHEMA_VERSION for r in back)


def test_metrics_csv_is_rfc4180(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics(path, _rows(), 2)
    raw = path.read_bytes()
    lines = raw.split(b"\r\n")
    assert lines[-1] == b"" and b"\n" not in raw.replace(b"\r\n", b"")
    assert lines[0].decode().split(",") == metric_columns(2)
    assert len({len(line.split(b",")) for line in lines[:-1]}) == 1


def test_metrics_rows_strictly_increasing(tmp_path):
    with MetricsWriter(tmp_path / "m.csv", 2) as w:
        w.write(_rows()[0])
        with pytest.raises(ValueError):
            w.write(_rows()[0])


def test_metrics_flushed_per_episode(tmp_path):
    path = tmp_path / "m.csv"
    w = MetricsWriter(path, 2)
    rows = _rows(4)
    for r in rows:
        w.write(r)
    # row 4 opens episode 1, so everything so far is on disk before close
    assert len(read_metrics(path)) == 4
    w.close()


def test_timings_round_trip(tmp_path):
    write_timings(tmp_path / "t.csv", [1.5, 2.25, 0.1])
    assert read_timings(tmp_path / "t.csv") == [1.5, 2.25, 0.1]


# --- plot ---------------------------------------------------------------------------


def test_band_is_per_step_std_across_runs():
    rng = np.random.default_rng(1)
    ys = rng.normal(size=(3, 5))
    curves = [[(200 * (i + 1), y[i]) for i in range(5)] for y in ys]
    x, mean, std = band(curves)
    np.testing.assert_array_equal(x, [200, 400, 600, 800, 1000])
    np.testing.assert_allclose(mean, ys.mean(axis=0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(std, ys.std(axis=0), rtol=0, atol=1e-15)


def test_plot_writes_self_contained_svg(tmp_path):
    paths = []
    for seed in range(3):
        rows = _rows(9)
        for r in rows:
            if r["eval_return"] is not None:
                r["eval_return"] = float(r["t"] * 10 + seed)
        p = tmp_path / f"m{seed}.csv"
        write_metrics(p, rows, 2)
        paths.append(p)
    out = plot_metrics(paths, tmp_path / "curve.svg")
    svg = out.read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert "<polygon" in svg and "<polyline" in svg
    assert "href" not in svg and "<image" not in svg
    assert eval_curve(read_metrics(paths[0])) == [(3, 30.0), (6, 60.0), (9, 90.0)]


def test_plot_empty_metrics_errors_without_writing(tmp_path):
    path = tmp_path / "empty.csv"
    write_metrics(path, [], 2)
    out = tmp_path / "curve.svg"
    with pytest.raises(PlotError):
        plot_metrics([path], out)
    assert not out.exists()
    assert cli.main(["plot", "--metrics", str(path), "--out", str(out)]) == 1
    assert not out.exists()


# --- error analysis -------------------------------------------------------------------


def _probe_cfg(n_probes=200):
    cfg = load_config(PENDULUM)
    cfg["error_analysis"]["n_probes"] = n_probes
    return cfg


def test_perfect_models_have_zero_value_error():
    curve = error_analysis(_probe_cfg(), perfect=True)
    assert np.all(curve.value_mse_mean < 1e-12)
    assert np.all(curve.one_step_mse < 1e-24)
    assert curve.horizons.tolist() == [1, 5, 10, 20, 40]


def test_horizon_zero_row_is_reward_model_mse():
    env = PendulumEnv()
    rng = np.random.default_rng(0)
    dyn = DynamicsEnsemble(n_members=2, hidden_sizes=(8,)).initialize(3, 1, rng)
    rew = RewardModel(hidden_sizes=(8,)).initialize(3, 1, rng)
    curve = probe_errors(env, dyn, rew, [0], 30, np.random.default_rng(5), hidden_sizes=(8,))
    replay = np.random.default_rng(5)
    sq = []
    for _ in range(30):
        s0 = env.reset(replay)
        pol = DeterministicPolicy(hidden_sizes=(8,)).initialize(3, (-2.0,), (2.0,), replay)
        a = pol.act(s0)
        sq.append((float(rew.predict(s0[None], a[None])[0]) - env.oracle_reward(s0, a)) ** 2)
    assert curve.value_mse_mean[0] == pytest.approx(np.mean(sq), rel=1e-12)


def test_env_without_oracle_rejected():
    class Blind:
        spec = PendulumEnv().spec

        def reset(self, rng):
            return PendulumEnv().reset(rng)

    with pytest.raises(ValueError, match="oracle"):
        probe_errors(Blind(), TrueModel(PendulumEnv(), 2), TrueModel(PendulumEnv(), 2), [1], 2,
                     np.random.default_rng(0))


def test_error_curve_csv_round_trip(tmp_path):
    curve = ErrorCurve(np.array([1, 5]), np.array([0.1, 0.2]), np.array([1.0, 2.0]), np.array([0.5, 0.25]))
    curve.write_csv(tmp_path / "e.csv")
    again = read_error_curve(tmp_path / "e.csv")
    assert again.rows() == curve.rows()
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "H,one_step_mse,value_mse_mean,value_mse_std"


def test_trained_models_value_error_grows_with_horizon():
    cfg = _probe_cfg(n_probes=60)
    cfg["error_analysis"]["train_steps"] = 1500
    curve = error_analysis(cfg)
    assert curve.spearman > 0.9
    assert np.all(curve.value_mse_mean >= 0) and np.all(curve.one_step_mse >= 0)


# --- CLI ---------------------------------------------------------------------------


def test_help_documents_every_flag(capsys):
    for sub, flags in [("train", ["--config", "--seed", "--steps", "--out"]),
                       ("eval", ["--policy", "--episodes", "--env", "--seed"]),
                       ("error-analysis", ["--config", "--horizons", "--out"]),
                       ("plot", ["--metrics", "--out", "--column"])]:
        with pytest.raises(SystemExit) as exc:
            cli.main([sub, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert re.search(rf"{flag}\b.*\n?\s+\S", text), flag


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", PENDULUM, "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_exits_1(capsys, tmp_path):
    missing = tmp_path / "missing.toml"
    assert cli.main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exits_1_with_key_and_line(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[rollout]\nhorizon = 15\ngamma = 2.0\n")
    assert cli.main(["train", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "rollout.gamma" in err and f"{bad}:3" in err


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", PENDULUM, "--seed", "7", "--steps", "40", "--out", str(out)]) == 0
    for name in ("config.toml", "metrics.csv", "timings.csv", "policy.params", "reward.params", "dyn_0.params"):
        assert (out / name).exists(), name
    rows = read_metrics(out / "metrics.csv")
    assert [r["t"] for r in rows] == list(range(1, 41))
    frozen = load_config(out / "config.toml")
    assert frozen["agent"]["seed"] == 7 and frozen["agent"]["total_steps"] == 40
    capsys.readouterr()
    assert cli.main(["eval", "--policy", str(out / "policy.params"), "--episodes", "3"]) == 0
    assert re.fullmatch(r"mean return -?\d+\.\d\d ± \d+\.\d\d over 3 episodes\n", capsys.readouterr().out)


def test_frozen_config_alone_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", LINEAR, "--steps", "25", "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(a / "config.toml"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_default_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV_VAR, str(tmp_path))
    assert cli.main(["train", "--config", LINEAR, "--steps", "3"]) == 0
    assert (tmp_path / "linear2d-seed0" / "metrics.csv").exists()


def test_eval_rejects_mismatched_env(tmp_path, capsys):
    path = tmp_path / "p.params"
    DeterministicPolicy(hidden_sizes=(4,)).initialize(3, (-2.0,), (2.0,), np.random.default_rng(0)).save(path)
    assert cli.main(["eval", "--policy", str(path), "--episodes", "1", "--env", "linear2d"]) == 1
    assert "state dim" in capsys.readouterr().err


def test_error_analysis_cli_writes_csv(tmp_path, capsys):
    cfg = tmp_path / "ea.toml"
    cfg.write_text("[error_analysis]\nn_probes = 3\nn_transitions = 100\ntrain_steps = 20\n"
                   "[dynamics]\nhidden_sizes = [8]\n[reward]\nhidden_sizes = [8]\n")
    out = tmp_path / "curve.csv"
    assert cli.main(["error-analysis", "--config", str(cfg), "--horizons", "0,2,4", "--out", str(out)]) == 0
    assert read_error_curve(out).horizons.tolist() == [0, 2, 4]
    with pytest.raises(SystemExit) as exc:
        cli.main(["error-analysis", "--config", str(cfg), "--horizons", "1,x"])
    assert exc.value.code == 2
