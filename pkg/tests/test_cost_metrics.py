import numpy as np
import pytest
from scipy import integrate, stats

from conftest import sym_model
from mmqlab import (
    ConstantControl,
    CostSpec,
    DiffusionSpec,
    Grid,
    StaticPriority,
    ValidationError,
    initial_state,
    simulate,
    simulate_ensemble,
    simulate_sde,
)
from mmqlab.cost_metrics import (
    discounted_cost,
    ergodic_cost,
    mean_ci,
    mean_empirical_measure,
    moment_report,
    optimality_gap,
    sde_cost_integrands,
    w1_distance,
)
from mmqlab.prelimit_sim import JointTrajectory
from test_hjb_solver import stationary_cost_1d

Q2 = CostSpec(1.0, 2)
ONE = ConstantControl([1.0])


def flat_trajectory(x, n=100, T=10.0, rho=1.0, beta=0.5):
    X = np.array([[x]])
    return JointTrajectory(np.array([0.0]), X, np.minimum(X, n), np.maximum(X - n, 0), np.array([0]), T, n, beta, np.array([rho]))


def ou_discounted_quadratic(ell, mu, S, x0, theta):
    """int_0^inf e^{-theta t} E[(X_t^+)^2] dt for the OU process dX = (ell - mu X)dt + sqrt(S) dW."""

    def second_pos_moment(t):
        m = ell / mu + (x0 - ell / mu) * np.exp(-mu * t)
        v = S / (2 * mu) * (1 - np.exp(-2 * mu * t))
        if v <= 0:
            return max(m, 0.0) ** 2
        s = np.sqrt(v)
        return (m * m + v) * stats.norm.cdf(m / s) + m * s * stats.norm.pdf(m / s)

    return integrate.quad(lambda t: np.exp(-theta * t) * second_pos_moment(t), 0, np.inf, limit=200)[0]


def test_mean_ci():
    est = mean_ci([1.0, 2.0, 3.0, 4.0])
    assert est.value == 2.5
    assert est.half_width == pytest.approx(stats.t.ppf(0.975, 3) * np.std([1, 2, 3, 4], ddof=1) / 2)
    assert est.se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert np.isnan(mean_ci([3.0]).half_width)


def test_discounted_zero_and_constant():
    tr = flat_trajectory(100, T=20.0)
    assert discounted_cost(tr, CostSpec.zero(), 1.0).value == 0.0
    est = discounted_cost(tr, CostSpec(constant=2.0), 1.0)
    assert est.value == pytest.approx(2.0, rel=1e-8)


def test_discounted_tail_rule():
    with pytest.raises(ValidationError, match="too short"):
        discounted_cost(flat_trajectory(120, T=2.0), Q2, 1.0)


def test_discounted_ou_closed_form():
    mu, ell, S, theta, x0 = 1.0, 0.4, 1.5, 1.0, 0.5
    sp = DiffusionSpec([ell], [[mu]], [[mu]], [[S]])
    ref = ou_discounted_quadratic(ell, mu, S, x0, theta)
    p = simulate_sde(sp, ONE, [x0], 12.0, 0.002, np.random.default_rng(7), n_paths=4000, record_every=600,
                     integrands=sde_cost_integrands(Q2, theta))
    est = discounted_cost(p, Q2, theta)
    assert abs(est.value - ref) < 3 * est.se


def test_ergodic_zero_and_constant():
    tr = flat_trajectory(120, T=20.0)
    assert ergodic_cost(tr, CostSpec.zero()).value == 0.0
    assert ergodic_cost(tr, CostSpec(constant=1.5)).value == 1.5
    with pytest.raises(ValidationError):
        ergodic_cost(tr, Q2, n_batches=5)


def test_ergodic_matches_stationary_density():
    sp = DiffusionSpec.from_params(sym_model())
    ref = stationary_cost_1d(sp)
    p = simulate_sde(sp, ONE, [0.0], 60.0, 0.002, np.random.default_rng(11), n_paths=400,
                     record_every=1, integrands=None)
    est = ergodic_cost(p, Q2, burn_in=5.0, control=ONE)
    # Euler bias at dt = 0.002 is far below the standard error here
    assert abs(est.value - ref) < 3 * est.se


def test_ergodic_trajectory_batch_means(sym):
    p = sym.with_n(50)
    tr = simulate(p, StaticPriority(), 200.0, initial_state(p, [0.0]), np.random.default_rng(2))
    est = ergodic_cost(tr, Q2)
    assert est.method == "batch_means" and est.n == 20 and est.value > 0


def test_empirical_measure_unit_mass(sym):
    tr = flat_trajectory(100)
    m = mean_empirical_measure(tr)
    assert m.mass == pytest.approx(1.0)
    assert np.count_nonzero(m.weights) == 1
    p = sym.with_n(40)
    tr2 = simulate(p, StaticPriority(), 20.0, [45], np.random.default_rng(0))
    m2 = mean_empirical_measure(tr2)
    assert m2.mass == pytest.approx(1.0)
    val, err = m2.integrate_cost(Q2)
    assert val >= 0 and err >= 0


def test_empirical_measure_cost_matches_time_average(sym):
    p = sym.with_n(100)
    tr = simulate(p, StaticPriority(), 100.0, initial_state(p, [0.0]), np.random.default_rng(3))
    m = mean_empirical_measure(tr, bins=128)
    val, err = m.integrate_cost(Q2)
    direct = ergodic_cost(tr, Q2, burn_in=0.0).value
    assert abs(val - direct) <= err + 1e-9


def test_empirical_measure_converges_to_diffusion_law():
    # d=1, static priority, n=400: state marginal of the occupation measure
    # vs the stationary law of the limiting diffusion
    p = sym_model(n=400)
    ens_tr = simulate(p, StaticPriority(), 300.0, initial_state(p, [0.0]), np.random.default_rng(5), stride=5)
    m = mean_empirical_measure(ens_tr)
    sp = DiffusionSpec.from_params(p)
    sde = simulate_sde(sp, ONE, [0.0], 20.0, 0.005, np.random.default_rng(6), n_paths=20000, record_every=4000)
    ref = sde.terminal[:, 0]
    dist = w1_distance(m.samples[:, 0], ref, m.sample_weights)
    assert dist < 0.15


def test_moment_report_basic():
    zero = flat_trajectory(100)
    rep = moment_report(zero, orders=(1, 2, 4))
    assert all(e.value == 0 for e in rep.values())
    far = flat_trajectory(130)  # |xhat| = 3 throughout
    rep = moment_report(far, orders=(1, 2, 4))
    assert rep[1].value <= rep[2].value <= rep[4].value
    assert rep[2].value == pytest.approx(9.0)


def test_moment_ratio_across_n(sym):
    vals = []
    for n in (100, 400):
        p = sym.with_n(n)
        ens = simulate_ensemble(p, StaticPriority(), 40.0, initial_state(p, [0.0]), 3, 20, burn_in=5.0, moment_orders=(2,))
        vals.append(moment_report(ens, orders=(2,))[2].value)
    assert 0.5 < vals[0] / vals[1] < 2.0


def test_gap_constant_cost_is_zero(sym):
    out = optimality_gap(sym, CostSpec(constant=1.0), Grid.box(4.0, 0.25), [20, 40], T=5.0, reps=3, seed=0)
    assert out["rho_star"] == pytest.approx(1.0)
    assert all(abs(r["gap"]) < 1e-9 for r in out["rows"])
