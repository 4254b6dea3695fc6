import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm, null_space

from conftest import SYM_Q, random_generator
from mmqlab import EnvGenerator, ReducibleGeneratorError, ValidationError
from mmqlab.env_chain import (
    EnvAnalytics,
    check_irreducible,
    deviation_matrix,
    sample_env_path,
    stationary_distribution,
    theta_matrix,
)


def theta_double_sum(lam, mu, rho, pi, U):
    # symmetrized in (i, j): pi_k U_kl + pi_l U_lk, the long-run covariance
    # of the centred rate integrals; for reversible chains both terms agree
    d, K = lam.shape
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            for k in range(K):
                for l in range(K):
                    ci = lam[i, k] - rho[i] * mu[i, k]
                    cj = lam[j, l] - rho[j] * mu[j, l]
                    out[i, j] += ci * cj * (pi[k] * U[k, l] + pi[l] * U[l, k])
    return out


@st.composite
def generators(draw, max_K=8):
    K = draw(st.integers(2, max_K))
    rates = draw(
        st.lists(st.floats(0.05, 5.0), min_size=K * K, max_size=K * K)
    )
    Q = np.array(rates).reshape(K, K)
    # sparsify but keep the cycle 0 -> 1 -> ... -> K-1 -> 0 so Q stays irreducible
    mask = np.array(draw(st.lists(st.booleans(), min_size=K * K, max_size=K * K))).reshape(K, K)
    for k in range(K):
        mask[k, (k + 1) % K] = True
    Q = np.where(mask, Q, 0.0)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def test_stationary_examples():
    np.testing.assert_allclose(stationary_distribution(SYM_Q), [0.5, 0.5], atol=1e-14)
    np.testing.assert_allclose(stationary_distribution([[-2, 2], [1, -1]]), [1 / 3, 2 / 3], atol=1e-14)
    np.testing.assert_allclose(stationary_distribution([[0.0]]), [1.0])


def test_stationary_against_null_space():
    rng = np.random.default_rng(3)
    for K in (3, 5, 8):
        Q = random_generator(rng, K)
        ns = null_space(Q.T)[:, 0]
        np.testing.assert_allclose(stationary_distribution(Q), ns / ns.sum(), atol=1e-12)


def test_deviation_examples():
    np.testing.assert_allclose(deviation_matrix(SYM_Q), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)
    np.testing.assert_array_equal(deviation_matrix([[0.0]]), [[0.0]])


def test_deviation_matches_time_integral():
    # Upsilon = int_0^inf (exp(Qt) - Pi) dt
    rng = np.random.default_rng(8)
    Q = random_generator(rng, 4)
    pi = stationary_distribution(Q)
    Pi = np.tile(pi, (4, 1))
    # the integrand decays like exp(-gap t); 80 time units is far past round-off
    ref, _ = quad_vec(lambda t: expm(Q * t) - Pi, 0, 80.0, epsabs=1e-12)
    np.testing.assert_allclose(deviation_matrix(Q), ref, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(generators())
def test_identities_property(Q):
    an = EnvAnalytics.from_generator(Q)
    res = an.residuals(Q)
    scale = max(1.0, np.abs(Q).max()) * max(1.0, np.abs(an.Upsilon).max())
    assert res["piQ"] < 1e-9 * scale
    assert res["pi_sum"] < 1e-12
    assert res["QU"] < 1e-9 * scale
    assert res["piU"] < 1e-9 * scale
    assert np.all(an.pi > 0)


def test_reducible_names_states():
    Q = np.array([[-1, 1, 0], [1, -1, 0], [0, 1, -1.0]])
    with pytest.raises(ReducibleGeneratorError) as exc:
        check_irreducible(Q)
    assert exc.value.unreachable == [2]


def test_invalid_generators_rejected():
    with pytest.raises(ValidationError):
        EnvGenerator(np.array([[-1, 2], [1, -1.0]]), 1.0, 10)
    with pytest.raises(ValidationError):
        EnvGenerator(np.array([[1, -1], [1, -1.0]]), 1.0, 10)


def test_theta_examples():
    an = EnvAnalytics.from_generator(SYM_Q)
    lam = np.array([[1.5, 0.5]])
    mu = np.ones((1, 2))
    th = theta_matrix(lam, mu, [1.0], an.pi, an.Upsilon)
    assert th.shape == (1, 1)
    assert th[0, 0] == pytest.approx(0.25, abs=1e-12)
    assert theta_double_sum(lam, mu, np.array([1.0]), an.pi, an.Upsilon)[0, 0] == pytest.approx(0.25, abs=1e-12)
    # no modulation
    assert np.all(theta_matrix([[2.0]], [[1.0]], [2.0], [1.0], [[0.0]]) == 0)
    # centred rates
    th0 = theta_matrix([[1.0, 2.0]], [[2.0, 4.0]], [0.5], an.pi, an.Upsilon)
    assert np.abs(th0).max() < 1e-15


def test_theta_against_double_sum_random():
    rng = np.random.default_rng(11)
    for K, d in ((3, 2), (5, 3)):
        Q = random_generator(rng, K)
        an = EnvAnalytics.from_generator(Q)
        lam = rng.uniform(0.1, 2, (d, K))
        mu = rng.uniform(0.5, 2, (d, K))
        rho = rng.uniform(0.1, 0.5, d)
        th = theta_matrix(lam, mu, rho, an.pi, an.Upsilon)
        np.testing.assert_allclose(th, theta_double_sum(lam, mu, rho, an.pi, an.Upsilon), atol=1e-12)
        # covariance matrix: symmetric positive semidefinite
        assert np.linalg.eigvalsh(th).min() > -1e-12


def test_env_path_single_state():
    path = sample_env_path(EnvGenerator(np.zeros((1, 1)), 1.0, 10), 5.0, np.random.default_rng(0))
    assert path.n_jumps == 0
    assert np.all(path.states == 0)


def test_env_path_occupation_and_jump_count():
    Q = np.array([[-2.0, 2.0], [1.0, -1.0]])
    env = EnvGenerator(Q, 1.0, 4)
    pi = stationary_distribution(Q)
    T = 50.0
    occ, jumps = [], []
    for r in range(20):
        p = sample_env_path(env, T, np.random.default_rng(100 + r))
        occ.append(p.occupation(2)[0])
        jumps.append(p.n_jumps)
    occ, jumps = np.array(occ), np.array(jumps)
    se = occ.std(ddof=1) / np.sqrt(len(occ))
    assert abs(occ.mean() - pi[0]) < 3 * se
    expect = env.speed * T * np.sum(pi * -np.diag(Q))
    se_j = jumps.std(ddof=1) / np.sqrt(len(jumps))
    assert abs(jumps.mean() - expect) < 3 * se_j
