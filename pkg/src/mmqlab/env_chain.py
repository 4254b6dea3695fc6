"""Background environment chain: stationary law, deviation matrix, sampling.

The environment is a finite CTMC with generator ``n**alpha * Q``. Everything
here works with the unscaled matrix ``Q``; the scaling only enters path
sampling and the generator of the joint process.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import NumericalError, ReducibleGeneratorError, ValidationError

#: tolerance for the defining identities of the stationary law
PI_TOL = 1e-10
#: tolerance for the deviation-matrix identities
UPSILON_TOL = 1e-9


def _as_generator(Q) -> np.ndarray:
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] < 1:
        raise ValidationError(f"Q must be a square K x K matrix, got shape {Q.shape}")
    problems = []
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        bad = np.argwhere(off < 0)
        problems.append(f"negative off-diagonal rates at {bad.tolist()}")
    scale = max(1.0, np.abs(Q).max())
    rowsum = Q.sum(axis=1)
    if np.any(np.abs(rowsum) > 1e-12 * scale * Q.shape[0]):
        bad = np.flatnonzero(np.abs(rowsum) > 1e-12 * scale * Q.shape[0])
        problems.append(f"rows {bad.tolist()} do not sum to zero (non-conservative)")
    if problems:
        raise ValidationError("invalid rate matrix: " + "; ".join(problems), problems)
    return Q


def check_irreducible(Q) -> None:
    """Raise :class:`ReducibleGeneratorError` unless the support graph of Q
    is strongly connected. The error names the states not reachable from
    state 0 (or, if all are reachable, those that cannot reach it back)."""
    Q = _as_generator(Q)
    K = Q.shape[0]
    if K == 1:
        return
    adj = (Q - np.diag(np.diag(Q))) > 0
    ncomp, _ = connected_components(adj, directed=True, connection="strong")
    if ncomp == 1:
        return
    # breadth-first reachability from state 0, forwards and backwards
    def reach(A):
        seen = {0}
        frontier = [0]
        while frontier:
            k = frontier.pop()
            for j in np.flatnonzero(A[k]):
                if j not in seen:
                    seen.add(int(j))
                    frontier.append(int(j))
        return seen

    fwd = reach(adj)
    unreachable = set(range(K)) - fwd
    if not unreachable:
        unreachable = set(range(K)) - reach(adj.T)
    raise ReducibleGeneratorError(
        f"Q is not irreducible: states {sorted(unreachable)} are not mutually "
        "reachable with state 0",
        unreachable,
    )


@dataclass(frozen=True)
class EnvGenerator:
    """Environment chain with unscaled generator ``Q`` switching at rate ``n**alpha``."""

    Q: np.ndarray
    alpha: float
    n: int

    def __post_init__(self):
        Q = _as_generator(self.Q)
        check_irreducible(Q)
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"n must be a positive integer, got {self.n}")
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def K(self) -> int:
        return self.Q.shape[0]

    @property
    def speed(self) -> float:
        """The switching-rate multiplier ``n**alpha``."""
        return float(self.n) ** self.alpha

    @property
    def scaled_Q(self) -> np.ndarray:
        return self.speed * self.Q

    def with_n(self, n: int) -> "EnvGenerator":
        return EnvGenerator(self.Q, self.alpha, n)

    def analytics(self) -> "EnvAnalytics":
        return EnvAnalytics.from_generator(self.Q)


def stationary_distribution(Q) -> np.ndarray:
    """Stationary law of an irreducible generator.

    Solves the stacked system ``[Q' ; e'] pi = [0 ; 1]`` by least squares,
    which is exact (consistent, full column rank) for irreducible ``Q``.
    """
    Q = _as_generator(Q)
    check_irreducible(Q)
    K = Q.shape[0]
    A = np.vstack([Q.T, np.ones((1, K))])
    rhs = np.zeros(K + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    # round-off can leave entries of order -1e-17
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.any(pi <= 0):
        raise NumericalError("stationary distribution has a zero entry; check conditioning of Q")
    return pi


def deviation_matrix(Q, pi=None) -> np.ndarray:
    """Deviation matrix ``(Pi - Q)^{-1} - Pi``.

    Solves ``Q Y = Y Q = Pi - I`` with ``pi Y = 0``.
    """
    Q = _as_generator(Q)
    if pi is None:
        pi = stationary_distribution(Q)
    pi = np.asarray(pi, dtype=float)
    K = Q.shape[0]
    Pi = np.tile(pi, (K, 1))
    A = Pi - Q
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"Pi - Q is ill-conditioned (cond={cond:.3e})")
    return np.linalg.inv(A) - Pi


def theta_matrix(lam, mu, rho, pi, Upsilon) -> np.ndarray:
    """Modulation covariance of the centered rate fluctuations.

    ``lam`` and ``mu`` are ``d x K`` tables of limit rates; the entry
    ``theta[i, j] = 2 sum_{k,l} c_i(k) c_j(l) pi_k Upsilon[k, l]`` with
    ``c_i(k) = lam[i, k] - rho[i] mu[i, k]``.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    pi = np.asarray(pi, dtype=float)
    Upsilon = np.atleast_2d(np.asarray(Upsilon, dtype=float))
    d, K = lam.shape
    if mu.shape != (d, K) or rho.shape != (d,) or pi.shape != (K,) or Upsilon.shape != (K, K):
        raise ValidationError(
            "dimension mismatch: lam %s, mu %s, rho %s, pi %s, Upsilon %s"
            % (lam.shape, mu.shape, rho.shape, pi.shape, Upsilon.shape)
        )
    c = lam - rho[:, None] * mu  # d x K
    W = pi[:, None] * Upsilon  # W[k, l] = pi_k Upsilon_kl
    theta = 2.0 * c @ W @ c.T
    # for non-reversible chains the bilinear form is not symmetric when d > 1;
    # its symmetric part is the long-run covariance of the centred rate integrals
    return 0.5 * (theta + theta.T)


@dataclass(frozen=True)
class EnvAnalytics:
    pi: np.ndarray
    Upsilon: np.ndarray
    Pi: np.ndarray = field(repr=False)

    @classmethod
    def from_generator(cls, Q) -> "EnvAnalytics":
        Q = _as_generator(Q)
        pi = stationary_distribution(Q)
        U = deviation_matrix(Q, pi)
        Pi = np.tile(pi, (len(pi), 1))
        for arr in (pi, U, Pi):
            arr.setflags(write=False)
        return cls(pi, U, Pi)

    def residuals(self, Q) -> dict:
        """Max-abs residuals of the defining identities."""
        Q = np.asarray(Q, dtype=float)
        I = np.eye(len(self.pi))
        return {
            "piQ": float(np.abs(self.pi @ Q).max()),
            "pi_sum": float(abs(self.pi.sum() - 1.0)),
            "QU": float(np.abs(Q @ self.Upsilon - (self.Pi - I)).max()),
            "UQ": float(np.abs(self.Upsilon @ Q - (self.Pi - I)).max()),
            "piU": float(np.abs(self.pi @ self.Upsilon).max()),
        }

    def to_dict(self) -> dict:
        return {"pi": self.pi.tolist(), "Upsilon": self.Upsilon.tolist()}


@dataclass(frozen=True)
class EnvPath:
    """Piecewise-constant environment path: ``states[i]`` holds on
    ``[times[i], times[i+1])`` and the last state holds up to ``T``."""

    times: np.ndarray
    states: np.ndarray
    T: float

    @property
    def n_jumps(self) -> int:
        return len(self.times) - 1

    def occupation(self, K: int) -> np.ndarray:
        ends = np.append(self.times[1:], self.T)
        occ = np.zeros(K)
        np.add.at(occ, self.states, ends - self.times)
        return occ / self.T

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.states[np.clip(idx, 0, None)]


def sample_env_path(env: EnvGenerator, T: float, rng: np.random.Generator, j0=None) -> EnvPath:
    """Exact jump-chain / holding-time sample of the chain with generator
    ``n**alpha Q`` on ``[0, T]``, started from ``pi`` unless ``j0`` is given."""
    if not T > 0:
        raise ValidationError(f"horizon must be positive, got {T}")
    Q = env.Q
    K = env.K
    if j0 is None:
        pi = stationary_distribution(Q)
        j = int(rng.choice(K, p=pi))
    else:
        j = int(j0)
    times = [0.0]
    states = [j]
    if K == 1:
        return EnvPath(np.array(times), np.array(states), float(T))
    exit_rate = -np.diag(Q) * env.speed
    jump = Q - np.diag(np.diag(Q))
    jump = jump / jump.sum(axis=1, keepdims=True)
    t = 0.0
    while True:
        t += rng.exponential(1.0 / exit_rate[j])
        if t >= T:
            break
        j = int(rng.choice(K, p=jump[j]))
        times.append(t)
        states.append(j)
    return EnvPath(np.array(times), np.array(states, dtype=int), float(T))
