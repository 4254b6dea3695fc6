import numpy as np
import pytest

from mmqlab import EnvGenerator, ModelParams

SYM_Q = [[-1.0, 1.0], [1.0, -1.0]]

# criterion number -> (label, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def sym_model(n=100, alpha=1.0, lam=(1.5, 0.5), mu=(1.0, 1.0), gamma=(0.5, 0.5)):
    """d=1, K=2 model on the symmetric two-state chain (Theta = 0.25 at the defaults)."""
    return ModelParams(EnvGenerator(np.array(SYM_Q), alpha, n), list(lam), list(mu), list(gamma))


def d2_model(n=400, alpha=1.0):
    """d=2, K=2 model with rho = (0.5, 0.5) and unequal abandonment."""
    return ModelParams(
        EnvGenerator(np.array(SYM_Q), alpha, n),
        [[0.7, 0.3], [0.3, 0.7]],
        [[1.0, 1.0], [1.0, 1.0]],
        [[0.5, 0.5], [2.0, 2.0]],
    )


def random_generator(rng, K):
    """Dense random generator; every off-diagonal rate is positive, hence irreducible."""
    Q = rng.uniform(0.1, 3.0, size=(K, K))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


@pytest.fixture
def sym():
    return sym_model()


@pytest.fixture
def d2():
    return d2_model()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        label, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {label}: {detail}")
