import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import SYM_Q, sym_model
from mmqlab import EnvGenerator, ModelParams
from mmqlab.harness import (
    EXIT_CONFIG,
    ConfigError,
    execute,
    fclt_check,
    main,
    regime,
    replay,
    validate_config,
)

SYM_CFG = {
    "label": "sym",
    "seed": 7,
    "model": {"n": 100, "alpha": 1.0, "Q": SYM_Q, "lambda": [1.5, 0.5], "mu": [1.0, 1.0], "gamma": [0.5, 0.5]},
    "cost": {"c": 1.0, "m": 2},
    "solver": {"criterion": "ergodic", "h": 0.1, "half_width": 6},
    "run": {"T": 5.0, "replications": 3, "dt": 0.01, "sde_paths": 50, "n_list": [20, 40, 80], "t_star": 1.0},
    "scan": {"m": 2, "shell_samples": 100},
}


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    f = tmp_path / name
    f.write_text(yaml.safe_dump(cfg))
    return f


def test_validation_collects_field_paths():
    with pytest.raises(ConfigError) as exc:
        validate_config({"model": {"n": 10}}, "simulate")
    v = exc.value.violations
    assert "seed" in v and "model.alpha" in v and "model.Q" in v and "run" in v


def test_bad_configs_exit_with_code_2(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = dict(SYM_CFG, model=dict(SYM_CFG["model"], Q=[[-1, 1], [0, 0]]))
    f = write_cfg(tmp_path, bad)
    assert main(["env-analyze", "--config", str(f), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    # nothing half-written survives a failed run
    assert not (tmp_path / "sym").exists() or not any((tmp_path / "sym").rglob("manifest.json"))


def test_env_analyze_report(tmp_path):
    out = execute("env-analyze", SYM_CFG, {}, tmp_path)
    rep = json.loads((out / "report.json").read_text())
    np.testing.assert_allclose(rep["pi"], [0.5, 0.5])
    np.testing.assert_allclose(rep["Upsilon"], [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)
    assert (out / "manifest.json").exists()


def test_simulate_is_deterministic_and_replayable(tmp_path):
    a = execute("simulate", SYM_CFG, {}, tmp_path)
    b = execute("simulate", SYM_CFG, {}, tmp_path)
    assert a != b
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    c = replay(a / "manifest.json", verify=True)
    assert (c / "trajectory_0000.csv").read_bytes() == (a / "trajectory_0000.csv").read_bytes()
    other = execute("simulate", SYM_CFG, {"seed": 8}, tmp_path)
    assert (other / "summary.json").read_bytes() != (a / "summary.json").read_bytes()


def test_replay_detects_tampering(tmp_path):
    out = execute("env-analyze", SYM_CFG, {}, tmp_path)
    man = json.loads((out / "manifest.json").read_text())
    man["config"]["seed"] = 99
    (out / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ConfigError):
        replay(out / "manifest.json")


def test_solve_hjb_constant_cost(tmp_path):
    cfg = dict(SYM_CFG, cost={"constant": 1.75})
    out = execute("solve-hjb", cfg, {}, tmp_path)
    rep = json.loads((out / "report.json").read_text())
    assert rep["rho_star"] == pytest.approx(1.75, abs=1e-10)
    assert (out / "field.csv").exists()


def test_cli_sde_and_scan(tmp_path, capsys):
    f = write_cfg(tmp_path, SYM_CFG)
    assert main(["sde", "--config", str(f), "--out", str(tmp_path), "--T", "1"]) == 0
    d2 = {
        "label": "d2",
        "seed": 11,
        "model": {"n": 100, "alpha": 1.0, "Q": SYM_Q, "lambda": [[0.7, 0.3], [0.3, 0.7]],
                  "mu": [[1, 1], [1, 1]], "gamma": [[0.5, 0.5], [2, 2]]},
        "scan": {"m": 2, "shell_samples": 100},
    }
    g = write_cfg(tmp_path, d2, "d2.yaml")
    assert main(["stability-scan", "--config", str(g), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.strip().splitlines()[-1]
    scan = json.loads((Path(out) / "scan.json").read_text())
    assert set(scan["reports"]) == {"averaged", "raw", "corrected"}
    assert "C2_improvement" in scan


def test_fclt_zero_horizon_has_zero_error():
    out = fclt_check(sym_model(), [20, 40, 80], 0.0, 5, 10, 0.01, seed=1)
    assert all(r["mean_abs_error"] == 0 and r["var_abs_error"] == 0 for r in out["rows"])


def test_fclt_needs_three_sizes():
    with pytest.raises(ConfigError):
        fclt_check(sym_model(), [20, 40], 1.0, 5, 10, 0.01, seed=1)


def test_regime_dispatch():
    assert regime(2.0) == "Lambda^2" and regime(1.0) == "Lambda^2 + Theta" and regime(0.5) == "Theta"
    # for alpha > 1 the environment drops out of the limit covariance
    fast = fclt_check(sym_model(alpha=2.0), [20, 40, 80], 0.0, 2, 2, 0.01, seed=0)
    slow = fclt_check(sym_model(alpha=0.5), [20, 40, 80], 0.0, 2, 2, 0.01, seed=0)
    np.testing.assert_allclose(fast["Sigma"], [[2.0]], rtol=1e-12)
    np.testing.assert_allclose(slow["Sigma"], [[0.25]], rtol=1e-12)


def test_fclt_single_environment_within_noise():
    # K = 1 Erlang-A: the limit is the piecewise OU process, and at these
    # sizes the prelimit variance already sits inside the Monte Carlo band
    env = EnvGenerator(np.zeros((1, 1)), 1.0, 100)
    p = ModelParams(env, [1.0], [1.0], [0.5])
    reps, paths = 4000, 20000
    out = fclt_check(p, [40, 160, 640], 1.0, reps, paths, 0.002, seed=3)
    band = 4 * np.sqrt(2 / reps + 2 / paths)
    for r in out["rows"]:
        assert r["var_rel_error"] < band
        assert r["mean_abs_error"] < 4 * np.sqrt(r["ref_var"] * (1 / reps + 1 / paths))
