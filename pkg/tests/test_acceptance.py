"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE``; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import contextlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import ACCEPTANCE, SYM_Q, d2_model, random_generator, sym_model
from mmqlab import (
    ClosureControl,
    CostSpec,
    DiffusionSpec,
    EnvGenerator,
    Grid,
    ModelParams,
    StaticPriority,
    TruncatedControl,
    omega_control_assign,
    omega_round,
    simulate_ensemble,
    simulate_sde,
    solve_discounted,
    solve_ergodic,
    static_priority_assign,
)
from mmqlab.cost_metrics import discounted_cost, ergodic_cost, optimality_gap, sde_cost_integrands
from mmqlab.env_chain import EnvAnalytics
from mmqlab.harness import fclt_check, main
from mmqlab.model_params import covariance
from mmqlab.prelimit_sim import check_assignment
from mmqlab.stability_lab import (
    LyapunovSpec,
    compare_corrected,
    delta_generator_apply,
    drift_inequality_scan,
    lyapunov_f,
    poisson_corrector,
    xi_weights,
)

pytestmark = pytest.mark.slow


@contextlib.contextmanager
def criterion(k, label):
    """Record PASS only if the body finishes; the body may set ``info['detail']``."""
    info = {"detail": ""}
    ok = False
    try:
        yield info
        ok = True
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        info["detail"] = (info["detail"] + " | " if info["detail"] else "") + msg
        raise
    finally:
        ACCEPTANCE[k] = (label, ok, info["detail"])
        print(f"[{'PASS' if ok else 'FAIL'}] {k}. {label}: {info['detail']}")


def smooth_control(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))

    def fn(X):
        S = X @ A.T
        E = np.exp(S - S.max(axis=1, keepdims=True))
        return E / E.sum(axis=1, keepdims=True)

    return TruncatedControl(ClosureControl(fn, d), R=4.0, delta=0.1)


# ---------------------------------------------------------------- 1


def test_criterion_1_environment_analytics():
    with criterion(1, "environment analytics") as info:
        an = EnvAnalytics.from_generator(np.array(SYM_Q))
        err_sym = np.abs(an.Upsilon - np.array([[0.25, -0.25], [-0.25, 0.25]])).max()
        assert err_sym < 1e-10, f"symmetric Upsilon error {err_sym:.2e}"
        rng = np.random.default_rng(20240601)
        worst = 0.0
        for _ in range(50):
            K = int(rng.integers(2, 9))
            Q = random_generator(rng, K)
            a = EnvAnalytics.from_generator(Q)
            Pi = np.tile(a.pi, (K, 1))
            worst = max(
                worst,
                np.abs(a.pi @ Q).max(),
                np.abs(Q @ a.Upsilon - (Pi - np.eye(K))).max(),
                np.abs(a.pi @ a.Upsilon).max(),
            )
        info["detail"] = f"|Upsilon - ref| = {err_sym:.1e}, worst identity residual over 50 generators = {worst:.1e}"
        assert worst < 1e-9, info["detail"]


# ---------------------------------------------------------------- 2


def test_criterion_2_poisson_corrector():
    with criterion(2, "Poisson corrector") as info:
        worst_res, worst_oracle = 0.0, 0.0
        for K in (2, 4):
            for alpha in (0.5, 1.0, 2.0):
                rng = np.random.default_rng(100 * K + int(10 * alpha))
                Q = random_generator(rng, K)
                lam = rng.uniform(0.2, 1.0, (2, K))
                mu = rng.uniform(0.5, 2.0, (2, K))
                gam = rng.uniform(0.3, 2.0, (2, K))
                env = EnvGenerator(Q, alpha, 200)
                pi = env.analytics().pi
                lam = lam / ((lam @ pi) / (mu @ pi)).sum()
                p = ModelParams(env, lam, mu, gam)
                dq = p.derive()
                X = np.rint(p.n * dq.rho + rng.uniform(-4, 4, (100, 2)) * p.n**dq.beta).astype(np.int64)
                X = np.clip(X, 0, None)
                spec = LyapunovSpec(2, xi_weights(p, 2), p.n)
                f = lambda Y: lyapunov_f(spec, Y, dq.rho)
                sp = StaticPriority()
                g = poisson_corrector(p, f, X, sp)
                D = np.stack([delta_generator_apply(p, f, X, np.full(len(X), k), sp) for k in range(K)], axis=1)
                scale = 1 + np.abs(D).max(axis=1)
                res = np.abs(g @ p.env.scaled_Q.T - D).max(axis=1) / scale
                worst_res = max(worst_res, res.max())
                # direct oracle: bordered system [n^a Q; pi] g = [Delta; 0]
                A = np.vstack([p.env.scaled_Q, pi])
                for i in range(len(X)):
                    gd = np.linalg.lstsq(A, np.append(D[i], 0.0), rcond=None)[0]
                    worst_oracle = max(worst_oracle, np.abs(gd - g[i]).max() / scale[i])
        info["detail"] = f"max scaled residual {worst_res:.1e}, max deviation from direct solve {worst_oracle:.1e}"
        assert worst_res < 1e-10 and worst_oracle < 1e-10, info["detail"]


# ---------------------------------------------------------------- 3


def test_criterion_3_policy_invariants():
    with criterion(3, "policy invariants") as info:
        rng = np.random.default_rng(3)
        total = 0
        worst_omega = 0.0
        repairs_box = 0
        # static priority on arbitrary states
        for d in (1, 2, 3, 5):
            for n in (10, 100, 1000):
                X = rng.integers(0, 3 * n, size=(20000, d))
                z, q = static_priority_assign(X, n)
                check_assignment(X, z, q, n)
                total += len(X)
        # omega-control: diffusion-scale states |xhat|_inf <= 8 with random smooth controls
        for d in (2, 3):
            for n in (10**4, 4 * 10**4, 16 * 10**4):
                for c in range(4):
                    rho = rng.dirichlet(np.full(d, 5.0))
                    beta = 0.5
                    v = smooth_control(d, 1000 * d + c)
                    X = np.rint(n * rho + rng.uniform(-8, 8, (30000, d)) * n**beta).astype(np.int64)
                    z, q, inf = omega_control_assign(X, n, v, 0.9 * rho.min(), rho, beta, return_info=True)
                    assert inf["inside"] == len(X) and inf["repaired"] == 0, f"repair at d={d}, n={n}"
                    check_assignment(X, z, q, n)
                    s = np.clip(X.sum(axis=1) - n, 0, None)
                    y = s[:, None] * v((X - n * rho) / n**beta)
                    assert np.array_equal(q.sum(axis=1), s), "omega mass"
                    worst_omega = max(worst_omega, (np.abs(q - y).max(axis=1) / d).max())
                    total += len(X)
        # omega-control anywhere in the control box: structural invariants after repair
        for d in (2, 3, 4):
            n = 200
            rho = rng.dirichlet(np.full(d, 5.0))
            kappa = 0.9 * rho.min()
            X = np.rint(n * rho + rng.uniform(-kappa, kappa, (40000, d)) * n).astype(np.int64)
            X = np.clip(X, 0, None)
            z, q, inf = omega_control_assign(X, n, smooth_control(d, d), kappa, rho, 0.5, return_info=True)
            check_assignment(X, z, q, n)
            assert np.array_equal(q.sum(axis=1), np.clip(X.sum(axis=1) - n, 0, None)), "omega mass (box)"
            repairs_box += inf["repaired"]
            total += len(X)
        # the rounding map itself on arbitrary nonnegative inputs
        for d in (1, 2, 3, 6):
            Y = rng.exponential(50.0, (25000, d)) * rng.integers(0, 2, (25000, 1))
            W = omega_round(Y)
            assert np.allclose(W.sum(axis=1), Y.sum(axis=1), rtol=1e-12, atol=1e-8), "omega mass (rounding)"
            worst_omega = max(worst_omega, (np.abs(W - Y).max(axis=1) / d).max())
            total += len(Y)
        info["detail"] = (
            f"{total} states, 0 violations, max distortion / d = {worst_omega:.2f} (bound 2), "
            f"{repairs_box} repairs in the full control box"
        )
        assert total >= 10**6
        assert worst_omega <= 2.0, info["detail"]


# ---------------------------------------------------------------- 4


def erlang_a_mean_queue(lam, mu, gam, n, tol=1e-16):
    """Stationary mean (X - n)^+ of the birth-death chain, computed in log space."""
    logp = [0.0]
    x = 0
    while True:
        x += 1
        death = min(x, n) * mu + max(x - n, 0) * gam
        logp.append(logp[-1] + np.log(lam) - np.log(death))
        if x > n and logp[-1] - max(logp) < np.log(tol):
            break
    logp = np.array(logp)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    xs = np.arange(len(w))
    return float((np.maximum(xs - n, 0) * w).sum())


def test_criterion_4_erlang_a():
    with criterion(4, "Erlang-A cross-check") as info:
        n = 100
        p = ModelParams(EnvGenerator(np.zeros((1, 1)), 1.0, n), [1.0], [1.0], [0.5])
        ref = erlang_a_mean_queue(float(p.lambda_n[0, 0]), float(p.mu_n[0, 0]), float(p.gamma_n[0, 0]), n)
        ens = simulate_ensemble(p, StaticPriority(), 400.0, [n], 4, 20, burn_in=20.0)
        mq = ens.mean_Q()[:, 0]
        est, se = mq.mean(), mq.std(ddof=1) / np.sqrt(len(mq))
        info["detail"] = f"simulated {est:.4f} +- {se:.4f} (SE), closed form {ref:.4f}, |z| = {abs(est - ref) / se:.2f}"
        assert abs(est - ref) < 3 * se, info["detail"]


# ---------------------------------------------------------------- 5


def test_criterion_5_covariance_trichotomy():
    with criterion(5, "covariance regime trichotomy") as info:
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = int(rng.integers(1, 4))
            Lam = np.diag(rng.uniform(0.1, 3.0, d))
            B = rng.normal(size=(d, d))
            Th = B @ B.T
            assert np.array_equal(covariance(Lam, Th, 1.0), covariance(Lam, Th, 0.5) + covariance(Lam, Th, 2.0))
        dq = sym_model().derive()
        # brute-force double sum for the worked example
        lam, mu, pi = np.array([1.5, 0.5]), np.array([1.0, 1.0]), np.array([0.5, 0.5])
        U = np.array([[0.25, -0.25], [-0.25, 0.25]])
        rho = (lam @ pi) / (mu @ pi)
        c = lam - rho * mu
        brute = 2 * sum(c[k] * c[l] * pi[k] * U[k, l] for k in range(2) for l in range(2))
        same = [sym_model(alpha=a).derive() for a in (0.5, 1.0, 2.0)]
        assert np.array_equal(same[1].Sigma, same[0].Sigma + same[2].Sigma)
        info["detail"] = f"Theta = {dq.Theta[0, 0]:.12g} (brute force {brute:.12g}), Sigma(1) = Sigma(<1) + Sigma(>1) exactly"
        assert brute == 0.25 and abs(dq.Theta[0, 0] - 0.25) < 1e-12, info["detail"]


# ---------------------------------------------------------------- 6


def test_criterion_6_fclt():
    with criterion(6, "FCLT desk-scale") as info:
        p = sym_model(alpha=0.5, lam=(1.9, 0.1))
        out = fclt_check(p, [50, 200, 800], 5.0, 10**4, 4 * 10**4, 1e-3, seed=2024)
        errs = [r["var_rel_error"] for r in out["rows"]]
        info["detail"] = "relative variance errors " + ", ".join(f"n={r['n']}: {e:.1%}" for r, e in zip(out["rows"], errs))
        assert out["var_error_strictly_decreasing"], info["detail"]
        assert errs[-1] < 0.15, info["detail"]


# ---------------------------------------------------------------- 7


def test_criterion_7_hjb():
    with criterion(7, "HJB correctness") as info:
        spec = DiffusionSpec.from_params(sym_model())
        g = Grid.box(8.0, 0.25)
        vc = solve_discounted(spec, CostSpec(constant=2.0), 0.5, g)
        ec = solve_ergodic(spec, CostSpec(constant=2.0), g)
        assert np.abs(vc.values - 4.0).max() < 1e-8 and abs(ec.rho_star - 2.0) < 1e-8, "constant-cost hooks"

        cost, theta = CostSpec(1.0, 2), 1.0
        V = solve_discounted(spec, cost, theta, Grid.box(8.0, 0.01))
        ctrl = V.truncated_control(6.0, 0.1)
        paths = simulate_sde(spec, ctrl, [0.0], 12.0, 0.002, np.random.default_rng(71), n_paths=10**4,
                             record_every=6000, integrands=sde_cost_integrands(cost, theta))
        dc = discounted_cost(paths, cost, theta)
        lo, hi = dc.ci
        disc_ok = lo <= V.value_at_origin <= hi

        E = solve_ergodic(spec, cost, Grid.box(8.0, 0.01))
        ectrl = E.truncated_control(6.0, 0.1)
        epaths = simulate_sde(spec, ectrl, [0.0], 100.0, 0.002, np.random.default_rng(72), n_paths=4000, record_every=25)
        ec_sim = ergodic_cost(epaths, cost, burn_in=10.0, control=ectrl)
        erg_rel = abs(E.rho_star - ec_sim.value) / ec_sim.value

        big = solve_ergodic(spec, cost, Grid.box(12.0, 0.01))
        box_rel = abs(big.rho_star - E.rho_star) / E.rho_star
        info["detail"] = (
            f"V(0) = {V.value_at_origin:.4f} vs MC {dc.value:.4f} [{lo:.4f}, {hi:.4f}]; "
            f"rho_* = {E.rho_star:.4f} vs simulated {ec_sim.value:.4f} ({erg_rel:.2%}); box x1.5 change {box_rel:.2%}"
        )
        assert disc_ok and erg_rel < 0.03 and box_rel < 0.01, info["detail"]


# ---------------------------------------------------------------- 8


def test_criterion_8_lyapunov_scan():
    with criterion(8, "Foster-Lyapunov scan") as info:
        rep = drift_inequality_scan(d2_model(n=400), StaticPriority(), 2, variant="averaged",
                                    rng=np.random.default_rng(8))
        cmp = compare_corrected(d2_model(n=400, alpha=0.5), StaticPriority(), 2, rng=np.random.default_rng(9))
        info["detail"] = (
            f"averaged C2 = {rep.C2:.4g}, satisfied {rep.satisfied_fraction:.3f} on {rep.n_states} states; "
            f"alpha=0.5 corrected C2 = {cmp['corrected']['C2']:.4g} vs raw {cmp['raw']['C2']:.4g} "
            f"(improvement {cmp['C2_improvement']:+.4g})"
        )
        assert rep.feasible and rep.C2 > 0 and rep.satisfied_fraction == 1.0, info["detail"]
        assert cmp["corrected"]["feasible"] and cmp["corrected_not_worse"], info["detail"]


# ---------------------------------------------------------------- 9


def test_criterion_9_optimality_gap():
    with criterion(9, "asymptotic-optimality gap") as info:
        out = optimality_gap(sym_model(), CostSpec(1.0, 2), Grid.box(10.0, 0.005), [50, 200, 800],
                             T=500.0, reps=600, seed=909, burn_in=50.0)
        info["detail"] = f"rho_* = {out['rho_star']:.4f}; " + ", ".join(
            f"n={r['n']}: gap {r['gap']:+.4f} +- {r['cost_ci_half_width']:.4f}" for r in out["rows"]
        )
        assert out["lower_bound_ok"], info["detail"]
        assert out["gaps_non_increasing"], info["detail"]


# ---------------------------------------------------------------- 10


def test_criterion_10_reproducibility(tmp_path, capsys):
    with criterion(10, "reproducibility") as info:
        sym = {
            "label": "sym", "seed": 7,
            "model": {"n": 100, "alpha": 1.0, "Q": SYM_Q, "lambda": [1.5, 0.5], "mu": [1.0, 1.0], "gamma": [0.5, 0.5]},
            "cost": {"c": 1.0, "m": 2},
            "solver": {"criterion": "ergodic", "h": 0.1, "half_width": 6},
            "run": {"T": 5.0, "replications": 3, "dt": 0.01, "sde_paths": 200, "n_list": [20, 40, 80],
                    "t_star": 1.0, "burn_in": 1.0},
        }
        d2 = {
            "label": "d2", "seed": 11,
            "model": {"n": 100, "alpha": 1.0, "Q": SYM_Q, "lambda": [[0.7, 0.3], [0.3, 0.7]],
                      "mu": [[1, 1], [1, 1]], "gamma": [[0.5, 0.5], [2, 2]]},
            "cost": {"c": 1.0, "m": 2},
            "policy": {"kind": "omega_control", "control": {"kind": "hjb", "R": 4}},
            "solver": {"criterion": "ergodic", "h": 0.25, "half_width": 5},
            "run": {"T": 10.0, "replications": 3},
            "scan": {"m": 2, "shell_samples": 100},
        }
        files = {}
        for name, cfg in (("sym", sym), ("d2", d2)):
            files[name] = tmp_path / f"{name}.yaml"
            files[name].write_text(yaml.safe_dump(cfg))
        runs = [
            ("sym", ["env-analyze"]), ("sym", ["simulate", "--threads", "2"]), ("sym", ["sde"]),
            ("sym", ["solve-hjb"]), ("sym", ["fclt-check"]), ("sym", ["optimality-gap", "--T", "20"]),
            ("d2", ["simulate"]), ("d2", ["stability-scan"]),
        ]
        checked = 0
        for name, args in runs:
            assert main(args[:1] + ["--config", str(files[name]), "--out", str(tmp_path / "runs")] + args[1:]) == 0, args
            first = capsys.readouterr().out.strip().splitlines()[-1]
            first = Path(first)
            assert main(["replay", str(first / "manifest.json"), "--verify"]) == 0, f"replay of {args[0]}"
            again = Path(capsys.readouterr().out.strip().splitlines()[-1])
            man = json.loads((first / "manifest.json").read_text())
            for f in man["outputs"]:
                assert (first / f).read_bytes() == (again / f).read_bytes(), f"{args[0]}: {f} differs"
                checked += 1
        info["detail"] = f"{len(runs)} runs replayed, {checked} output files byte-identical"
