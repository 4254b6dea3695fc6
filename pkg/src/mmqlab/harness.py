"""Command-line experiments: configuration, seeding, persistence, recipes.

Every command reads a YAML config, writes its outputs to a fresh directory
``<out>/<label>/<command>[-k]/`` and records a ``manifest.json`` from which
``mmqlab replay`` reproduces the run byte for byte.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from .cost_metrics import mean_ci, optimality_gap
from .errors import MMQError, NumericalError, PolicyError, ValidationError
from .hjb_solver import CostSpec, Grid, solve_discounted, solve_ergodic
from .limit_diffusion import ConstantControl, DiffusionSpec, simulate_sde
from .model_params import ModelParams, load_gap, load_gap_limit
from .prelimit_sim import (
    OmegaControl,
    StaticPriority,
    initial_state,
    replication_seeds,
    simulate,
    simulate_ensemble,
)
from .stability_lab import drift_inequality_scan, xi_weights

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
COMMANDS = (
    "env-analyze",
    "simulate",
    "sde",
    "solve-hjb",
    "stability-scan",
    "fclt-check",
    "optimality-gap",
)


class ConfigError(ValidationError):
    """Invalid experiment configuration; ``violations`` holds field paths."""


# ---------------------------------------------------------------- config


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", ["<config>"])
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", ["<config>"]) from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping", ["<config>"])
    return cfg


def _get(cfg, dotted, default=..., kind=None):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is ...:
                raise ConfigError(f"missing config field {dotted}", [dotted])
            return default
        node = node[part]
    if kind is not None and node is not None:
        try:
            node = kind(node)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config field {dotted} must be {kind.__name__}, got {node!r}", [dotted]) from exc
    return node


def validate_config(cfg: dict, command: str) -> None:
    """Collect structural problems with their field paths."""
    problems = []
    if "seed" not in cfg or cfg["seed"] is None:
        problems.append("seed")
    elif not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        problems.append("seed")
    model = cfg.get("model")
    if not isinstance(model, dict):
        problems.append("model")
    else:
        for k in ("n", "alpha", "Q", "lambda", "mu", "gamma"):
            if k not in model:
                problems.append(f"model.{k}")
    if command in ("solve-hjb", "optimality-gap") and not isinstance(cfg.get("solver"), dict):
        problems.append("solver")
    if command in ("simulate", "sde", "fclt-check", "optimality-gap") and not isinstance(cfg.get("run"), dict):
        problems.append("run")
    if problems:
        raise ConfigError("invalid config fields: " + ", ".join(problems), problems)


def build_params(cfg) -> ModelParams:
    try:
        params = ModelParams.from_dict(cfg["model"])
        params.validate().raise_if_failed()
    except ValidationError as exc:
        raise ConfigError(f"model block: {exc}", [f"model: {v}" for v in (exc.violations or [str(exc)])]) from exc
    return params


def build_cost(cfg) -> CostSpec:
    c = cfg.get("cost", {}) or {}
    try:
        return CostSpec(float(c.get("c", 1.0)), float(c.get("m", 2.0)), c.get("constant"))
    except ValidationError as exc:
        raise ConfigError(f"cost block: {exc}", ["cost"]) from exc


def build_grid(cfg, d, h_override=None) -> Grid:
    h = h_override if h_override is not None else _get(cfg, "solver.h", kind=float)
    w = _get(cfg, "solver.half_width")
    try:
        return Grid.box(w, h, d)
    except ValidationError as exc:
        raise ConfigError(f"solver block: {exc}", ["solver.h", "solver.half_width"]) from exc


def _control_from_cfg(cfg, block, d, solution=None):
    kind = block.get("kind", "constant")
    if kind == "constant":
        u = block.get("u")
        if u is None:
            u = np.eye(d)[-1]
        try:
            return ConstantControl(u)
        except PolicyError as exc:
            raise ConfigError(f"policy.control.u: {exc}", ["policy.control.u"]) from exc
    if kind == "hjb":
        if solution is None:
            raise ConfigError("policy.control.kind = hjb needs a solver block", ["policy.control.kind"])
        R = block.get("R")
        return solution.truncated_control(float(R), float(block.get("delta", 0.1))) if R else solution.as_control()
    raise ConfigError(f"unknown control kind {kind!r}", ["policy.control.kind"])


def build_policy(cfg, d, solution=None):
    pol = cfg.get("policy", {"kind": "static_priority"}) or {"kind": "static_priority"}
    kind = pol.get("kind", "static_priority")
    if kind == "static_priority":
        return StaticPriority()
    if kind == "omega_control":
        v = _control_from_cfg(cfg, pol.get("control", {}) or {}, d, solution)
        return OmegaControl(v, pol.get("kappa"))
    raise ConfigError(f"unknown policy kind {kind!r}", ["policy.kind"])


def config_digest(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- persistence


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def write_table(path, rows: list) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in cols])


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import numba
    import scipy

    return {
        "mmqlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pyyaml": yaml.__version__,
    }


def _fresh_dir(base: Path) -> Path:
    if not base.exists():
        return base
    k = 1
    while True:
        cand = base.with_name(f"{base.name}-{k}")
        if not cand.exists():
            return cand
        k += 1


# ---------------------------------------------------------------- recipes


def _seed_for(master: int, stream: int) -> int:
    """Independent sub-seed for a named stream of a run."""
    return int(np.random.SeedSequence(int(master), spawn_key=(10**6 + stream,)).generate_state(1)[0])


def env_analyze(cfg, ctx) -> dict:
    params = build_params(cfg)
    an = params.analytics
    dq = params.derive()
    report = {
        "pi": an.pi,
        "Upsilon": an.Upsilon,
        "residuals": an.residuals(params.env.Q),
        "Theta": dq.Theta,
        "Sigma": dq.Sigma,
        "derived": dq.to_dict(),
        "load_gap": load_gap(params),
        "load_gap_limit": load_gap_limit(params),
    }
    write_json(ctx["dir"] / "report.json", report)
    return report


def _policy(cfg, params, ctx):
    pol = cfg.get("policy", {}) or {}
    ctrl = pol.get("control", {}) or {}
    solution = _solve(cfg, params, ctx) if ctrl.get("kind") == "hjb" else None
    return build_policy(cfg, params.d, solution)


def run_simulate(cfg, ctx) -> dict:
    params = build_params(cfg)
    policy = _policy(cfg, params, ctx)
    T = ctx["T"] if ctx["T"] is not None else _get(cfg, "run.T", kind=float)
    reps = _get(cfg, "run.replications", 1, int)
    keep = _get(cfg, "run.save_trajectories", min(reps, 5), int)
    stride = _get(cfg, "run.stride", 1, int)
    x0 = initial_state(params, _get(cfg, "run.x0_hat", [0.0] * params.d))
    j0 = _get(cfg, "run.j0", None)
    seeds = replication_seeds(ctx["seed"], reps)
    summaries = []
    for r, s in enumerate(seeds):
        tr = simulate(params, policy, T, x0, np.random.default_rng(int(s)), j0=j0, stride=stride)
        if r < keep:
            tr.to_csv(ctx["dir"] / f"trajectory_{r:04d}.csv")
        summaries.append(dict(tr.summary(), replication=r, seed=int(s)))
    mq = mean_ci([s["mean_Q"][0] if params.d == 1 else sum(s["mean_Q"]) for s in summaries])
    out = {"replications": summaries, "mean_total_queue": mq.to_dict(), "policy": policy.describe()}
    write_json(ctx["dir"] / "summary.json", out)
    return out


def run_sde(cfg, ctx) -> dict:
    params = build_params(cfg)
    spec = DiffusionSpec.from_params(params)
    T = ctx["T"] if ctx["T"] is not None else _get(cfg, "run.T", kind=float)
    dt = ctx["dt"] if ctx["dt"] is not None else _get(cfg, "run.dt", 1e-3, float)
    paths = _get(cfg, "run.sde_paths", 1, int)
    every = _get(cfg, "run.record_every", 1, int)
    pol = cfg.get("policy", {}) or {}
    v = _control_from_cfg(cfg, pol.get("control", {}) or {}, params.d)
    x0 = np.asarray(_get(cfg, "run.x0_hat", [0.0] * params.d), dtype=float)
    path = simulate_sde(spec, v, x0, T, dt, np.random.default_rng(_seed_for(ctx["seed"], 1)), paths, every)
    path.to_csv(ctx["dir"] / "path_0000.csv")
    term = path.terminal
    out = {
        "spec": spec.to_dict(),
        "terminal_mean": term.mean(axis=0),
        "terminal_cov": np.atleast_2d(np.cov(term.T)) if paths > 1 else None,
        "paths": paths,
        "dt": dt,
        "T": T,
    }
    write_json(ctx["dir"] / "summary.json", out)
    return out


def _solve(cfg, params, ctx):
    spec = DiffusionSpec.from_params(params)
    cost = build_cost(cfg)
    grid = build_grid(cfg, params.d, ctx.get("grid_h"))
    crit = ctx.get("criterion") or _get(cfg, "solver.criterion", "ergodic")
    tol = _get(cfg, "solver.tol", 1e-8, float)
    max_iter = _get(cfg, "solver.max_iter", 500, int)
    if crit == "ergodic":
        return solve_ergodic(spec, cost, grid, tol=tol, max_iter=max_iter)
    if crit == "discounted":
        theta = _get(cfg, "solver.theta", kind=float)
        return solve_discounted(spec, cost, theta, grid, tol=tol, max_iter=max_iter)
    raise ConfigError(f"unknown criterion {crit!r}", ["solver.criterion"])


def run_solve_hjb(cfg, ctx) -> dict:
    params = build_params(cfg)
    sol = _solve(cfg, params, ctx)
    sol.to_csv(ctx["dir"] / "field.csv")
    out = dict(sol.metadata(), cost=build_cost(cfg).to_dict())
    write_json(ctx["dir"] / "report.json", out)
    return out


def run_stability_scan(cfg, ctx) -> dict:
    params = build_params(cfg)
    policy = _policy(cfg, params, ctx)
    sc = cfg.get("scan", {}) or {}
    m = int(sc.get("m", 2))
    variants = sc.get("variants", ["averaged", "raw", "corrected"])
    rng = np.random.default_rng(_seed_for(ctx["seed"], 2))
    kw = dict(
        core_radius=float(sc.get("core_radius", 1.0)),
        c0=float(sc.get("c0", 4.0)),
        shell_samples=int(sc.get("shell_samples", 2000)),
    )
    reports = {}
    for v in variants:
        reports[v] = drift_inequality_scan(params, policy, m, variant=v, rng=np.random.default_rng(rng.integers(2**32)), **kw).to_dict()
    out = {"reports": reports, "xi": xi_weights(params, m)}
    if "raw" in reports and "corrected" in reports:
        out["C2_improvement"] = reports["corrected"]["C2"] - reports["raw"]["C2"]
    write_json(ctx["dir"] / "scan.json", out)
    return out


def regime(alpha: float) -> str:
    if alpha > 1:
        return "Lambda^2"
    if alpha == 1:
        return "Lambda^2 + Theta"
    return "Theta"


def fclt_check(
    params,
    n_list,
    t_star: float,
    reps: int,
    sde_paths: int,
    dt: float,
    seed: int,
    x0_hat=None,
    threads: int = 1,
) -> dict:
    """Mean and variance of ``Xhat^n(t*)`` under static priority against an
    Euler reference of the limit diffusion started at the same scaled
    point (``v = e_d``, the limit of static priority for ``d = 1`` and the
    last-class-queues rule in general)."""
    if len(n_list) < 3:
        raise ConfigError("fclt-check needs at least 3 values in n_list", ["run.n_list"])
    d = params.d
    x0_hat = np.zeros(d) if x0_hat is None else np.asarray(x0_hat, dtype=float)
    spec = DiffusionSpec.from_params(params)
    control = ConstantControl(np.eye(d)[-1])
    refs = {}
    rows = []
    for i, n in enumerate(n_list):
        p_n = params.with_n(int(n))
        dq = p_n.derive()
        x0 = initial_state(p_n, x0_hat)
        xh0 = (x0 - n * dq.rho) / n**dq.beta
        key = tuple(np.round(xh0, 12))
        if key not in refs:
            if t_star > 0:
                nsteps = int(round(t_star / dt))
                path = simulate_sde(
                    spec, control, xh0, t_star, t_star / nsteps,
                    np.random.default_rng(_seed_for(seed, 100 + len(refs))), sde_paths, record_every=nsteps,
                )
                refs[key] = path.terminal
            else:
                refs[key] = np.broadcast_to(xh0, (sde_paths, d)).copy()
        ref = refs[key]
        ens = simulate_ensemble(
            p_n, StaticPriority(), max(t_star, 1e-12), x0, _seed_for(seed, i), reps,
            snapshot_times=[t_star], threads=threads,
        )
        xs = ens.scaled_snapshots[0]
        m_pre, m_ref = xs.mean(axis=0), ref.mean(axis=0)
        v_pre = xs.var(axis=0, ddof=1)
        v_ref = ref.var(axis=0, ddof=1)
        rel = np.where(v_ref > 0, np.abs(v_pre - v_ref) / np.where(v_ref > 0, v_ref, 1.0), np.abs(v_pre))
        rows.append({
            "n": int(n),
            "mean": float(m_pre[0]) if d == 1 else m_pre.tolist(),
            "ref_mean": float(m_ref[0]) if d == 1 else m_ref.tolist(),
            "mean_abs_error": float(np.abs(m_pre - m_ref).max()),
            "var": float(v_pre[0]) if d == 1 else v_pre.tolist(),
            "ref_var": float(v_ref[0]) if d == 1 else v_ref.tolist(),
            "var_abs_error": float(np.abs(v_pre - v_ref).max()),
            "var_rel_error": float(rel.max()),
        })
    errs = [r["var_rel_error"] for r in rows]
    return {
        "t_star": t_star,
        "replications": reps,
        "sde_paths": sde_paths,
        "dt": dt,
        "alpha": params.alpha,
        "regime": regime(params.alpha),
        "Sigma": DiffusionSpec.from_params(params).Sigma,
        "rows": rows,
        "var_error_strictly_decreasing": all(b < a for a, b in zip(errs, errs[1:])),
    }


def run_fclt_check(cfg, ctx) -> dict:
    params = build_params(cfg)
    n_list = ctx["n_list"] or _get(cfg, "run.n_list")
    out = fclt_check(
        params,
        n_list,
        _get(cfg, "run.t_star", 5.0, float),
        _get(cfg, "run.replications", kind=int),
        _get(cfg, "run.sde_paths", 40000, int),
        ctx["dt"] if ctx["dt"] is not None else _get(cfg, "run.dt", 1e-3, float),
        ctx["seed"],
        _get(cfg, "run.x0_hat", None),
        ctx["threads"],
    )
    write_json(ctx["dir"] / "fclt.json", out)
    write_table(ctx["dir"] / "fclt.csv", [{k: v for k, v in r.items() if not isinstance(v, list)} for r in out["rows"]])
    return out


def run_optimality_gap(cfg, ctx) -> dict:
    params = build_params(cfg)
    cost = build_cost(cfg)
    grid = build_grid(cfg, params.d, ctx.get("grid_h"))
    n_list = ctx["n_list"] or _get(cfg, "run.n_list")
    T = ctx["T"] if ctx["T"] is not None else _get(cfg, "run.T", kind=float)
    out = optimality_gap(
        params, cost, grid, n_list, T,
        _get(cfg, "run.replications", kind=int), ctx["seed"],
        burn_in=_get(cfg, "run.burn_in", None),
        R=_get(cfg, "policy.control.R", None),
        delta=_get(cfg, "policy.control.delta", 0.1, float),
        threads=ctx["threads"],
    )
    write_json(ctx["dir"] / "gap.json", out)
    write_table(ctx["dir"] / "gap.csv", out["rows"])
    return out


RECIPES = {
    "env-analyze": env_analyze,
    "simulate": run_simulate,
    "sde": run_sde,
    "solve-hjb": run_solve_hjb,
    "stability-scan": run_stability_scan,
    "fclt-check": run_fclt_check,
    "optimality-gap": run_optimality_gap,
}


# ---------------------------------------------------------------- driver


def _apply_overrides(cfg, ov) -> dict:
    cfg = copy.deepcopy(cfg)
    if ov.get("seed") is not None:
        cfg["seed"] = int(ov["seed"])
    if ov.get("n") is not None:
        cfg.setdefault("model", {})["n"] = int(ov["n"])
    return cfg


def execute(command: str, cfg: dict, overrides: dict, out_root, threads: int = 1) -> Path:
    """Run one command and return its output directory."""
    cfg = _apply_overrides(cfg, overrides)
    validate_config(cfg, command)
    label = str(cfg.get("label", "run"))
    base = _fresh_dir(Path(out_root) / label / command)
    base.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{base.name}.", dir=base.parent))
    ctx = {
        "dir": tmp,
        "seed": int(cfg["seed"]),
        "threads": int(threads),
        "T": overrides.get("T"),
        "dt": overrides.get("dt"),
        "grid_h": overrides.get("grid_h"),
        "criterion": overrides.get("criterion"),
        "n_list": overrides.get("n_list"),
    }
    try:
        RECIPES[command](cfg, ctx)
        files = sorted(p.name for p in tmp.iterdir())
        manifest = {
            "command": command,
            "config": cfg,
            "config_digest": config_digest(cfg),
            "seed": int(cfg["seed"]),
            "overrides": {k: v for k, v in overrides.items() if v is not None and k not in ("seed", "n")},
            "threads": int(threads),
            "versions": versions(),
            "outputs": {f: _file_digest(tmp / f) for f in files},
        }
        write_json(tmp / "manifest.json", manifest)
        os.rename(tmp, base)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return base


def replay(manifest_path, out_root=None, threads=None, verify=False) -> Path:
    manifest_path = Path(manifest_path)
    try:
        man = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}", ["<manifest>"]) from exc
    for k in ("command", "config", "seed"):
        if k not in man:
            raise ConfigError(f"manifest lacks {k}", [k])
    if config_digest(man["config"]) != man.get("config_digest"):
        raise ConfigError("manifest config does not match its digest", ["config_digest"])
    root = Path(out_root) if out_root is not None else manifest_path.parent.parent.parent
    ov = dict(man.get("overrides", {}))
    out = execute(man["command"], man["config"], ov, root, man.get("threads", 1) if threads is None else threads)
    if verify:
        new = json.loads((out / "manifest.json").read_text())["outputs"]
        if new != man.get("outputs"):
            diff = sorted(k for k in set(new) | set(man.get("outputs", {})) if new.get(k) != man["outputs"].get(k))
            raise NumericalError(f"replay outputs differ from the manifest: {diff}")
    return out


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for replications")
    common.add_argument("--out", default="runs", help="output root directory")

    p = argparse.ArgumentParser(prog="mmqlab", description="Many-server queues in a random environment.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--n", type=int, help="override model.n")
        s.add_argument("--T", type=float, help="override the horizon")
        s.add_argument("--dt", type=float, help="override the Euler step")
        s.add_argument("--grid-h", type=float, dest="grid_h", help="override the HJB mesh width")
        s.add_argument("--n-list", type=int, nargs="+", dest="n_list", help="override run.n_list")
        if name == "solve-hjb":
            s.add_argument("--criterion", choices=["ergodic", "discounted"])
    r = sub.add_parser("replay", parents=[common])
    r.add_argument("manifest", help="manifest.json of a previous run")
    r.add_argument("--verify", action="store_true", help="fail unless outputs are byte-identical")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "replay":
            out = replay(args.manifest, args.out if args.out != "runs" else None,
                         args.threads if args.threads != 1 else None, args.verify)
        else:
            cfg = load_config(args.config)
            ov = {
                "seed": args.seed, "n": args.n, "T": args.T, "dt": args.dt, "grid_h": args.grid_h,
                "n_list": args.n_list, "criterion": getattr(args, "criterion", None),
            }
            out = execute(args.command, cfg, ov, args.out, args.threads)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", []) or []:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PolicyError, MMQError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
