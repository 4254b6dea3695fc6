"""Generators of the prelimit chain, Lyapunov functions, the Poisson
corrector for the environment and numerical Foster-Lyapunov scans.

Scalar fields are callables on batches: ``f(X)`` with ``X`` of shape
``(N, d)`` returning ``(N,)``; fields that also depend on the environment are
``f(X, k)`` with ``k`` an ``(N,)`` integer array.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

CENTERING_TOL = 1e-8


@dataclass(frozen=True)
class LyapunovSpec:
    m: int
    xi: np.ndarray
    n: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2 or self.m % 2:
            raise ValidationError(f"m must be an even integer >= 2, got {self.m}")
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if np.any(xi <= 0):
            raise ValidationError(f"xi must be positive, got {xi}")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "m", int(self.m))


def lyapunov_f(spec: LyapunovSpec, x, rho) -> np.ndarray:
    """``sum_i xi_i |x_i - rho_i n|^m``; accepts a point or an ``(N, d)`` batch."""
    x = np.asarray(x, dtype=float)
    val = (spec.xi * np.abs(x - np.asarray(rho) * spec.n) ** spec.m).sum(axis=-1)
    return val if np.ndim(val) else float(val)


@dataclass(frozen=True)
class XiInfo:
    xi: np.ndarray
    c1: float
    c2: float
    eps1: float
    uniform_fallback: bool


def xi_weights(params, m: int, c2: float | None = None, return_info: bool = False):
    """Weights ``xi_1 = 1``, ``xi_i = (eps1^m / d^m) min_{i'<i} xi_i'`` with
    ``eps1 = c1 / (8 c2)``, ``c1 = max |gamma^n - mu^n|`` and ``c2`` a lower
    bound on all ``mu^n, gamma^n`` (default ``0.9`` times their minimum).
    When ``c1 = 0`` the recursion degenerates and uniform weights are used."""
    if int(m) != m or m < 2 or m % 2:
        raise ValidationError(f"m must be an even integer >= 2, got {m}")
    d = params.d
    mu, gam = params.mu_n, params.gamma_n
    c1 = float(np.abs(gam - mu).max())
    if c2 is None:
        c2 = 0.9 * float(min(mu.min(), gam.min()))
    if not c2 > 0:
        raise ValidationError(f"c2 must be positive, got {c2}")
    eps1 = c1 / (8.0 * c2)
    fallback = eps1 == 0.0
    xi = np.ones(d)
    if fallback:
        warnings.warn("mu == gamma everywhere: eps1 = 0, using uniform xi", RuntimeWarning, stacklevel=2)
    else:
        for i in range(1, d):
            xi[i] = (eps1**m / d**m) * xi[:i].min()
    if return_info:
        return XiInfo(xi, c1, float(c2), eps1, fallback)
    return xi


# ---------------------------------------------------------------- generators


def _assign(params, X, policy):
    dq = params.derive()
    z, q = policy.assign(X, params.n, dq.rho, dq.beta)
    return np.atleast_2d(z).astype(float), np.atleast_2d(q).astype(float)


def _unit(d):
    return np.eye(d, dtype=np.int64)


def _jump_part(f_here, f_up, f_down, lam, mu, gam, z, q):
    """``sum_i lam_i (f(x+e_i)-f) + (mu_i z_i + gam_i q_i)(f(x-e_i)-f)``."""
    down_rate = mu * z + gam * q
    up = lam * (f_up - f_here[:, None])
    down = np.where(down_rate > 0, down_rate * (f_down - f_here[:, None]), 0.0)
    return (up + down).sum(axis=1)


def _neighbour_values(f, X, *extra):
    d = X.shape[1]
    E = _unit(d)
    up = np.stack([f(X + E[i], *extra) for i in range(d)], axis=1)
    down = np.stack([f(X - E[i], *extra) for i in range(d)], axis=1)
    return up, down


def averaged_generator_apply(params, f, x, policy):
    """Generator of the averaged process (rates ``lambda^n pi`` etc.)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.int64))
    z, q = _assign(params, X, policy)
    pi = params.analytics.pi
    up, down = _neighbour_values(f, X)
    out = _jump_part(f(X), up, down, params.lambda_n @ pi, params.mu_n @ pi, params.gamma_n @ pi, z, q)
    return out if np.ndim(x) > 1 else float(out[0])


def queue_generator_apply(params, f, x, k, policy):
    """Queue part of the generator in environment ``k`` applied to ``f(X)``."""
    X = np.atleast_2d(np.asarray(x, dtype=np.int64))
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (len(X),))
    z, q = _assign(params, X, policy)
    up, down = _neighbour_values(f, X)
    out = _jump_part(f(X), up, down, params.lambda_n.T[k], params.mu_n.T[k], params.gamma_n.T[k], z, q)
    return out if np.ndim(x) > 1 else float(out[0])


def delta_generator_apply(params, f, x, k, policy):
    """``(averaged - environment-k)`` generator, assembled from the rate
    differences ``lambda-bar - lambda(k)`` etc."""
    X = np.atleast_2d(np.asarray(x, dtype=np.int64))
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (len(X),))
    z, q = _assign(params, X, policy)
    pi = params.analytics.pi
    dl = (params.lambda_n @ pi) - params.lambda_n.T[k]
    dm = (params.mu_n @ pi) - params.mu_n.T[k]
    dg = (params.gamma_n @ pi) - params.gamma_n.T[k]
    up, down = _neighbour_values(f, X)
    f0 = f(X)
    out = (dl * (up - f0[:, None]) + np.where(z + q > 0, (dm * z + dg * q) * (down - f0[:, None]), 0.0)).sum(axis=1)
    return out if np.ndim(x) > 1 else float(out[0])


def full_generator_apply(params, f, x, k, policy):
    """Generator of the joint chain applied to ``f(X, k)``."""
    X = np.atleast_2d(np.asarray(x, dtype=np.int64))
    N = len(X)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (N,)).copy()
    z, q = _assign(params, X, policy)
    up, down = _neighbour_values(f, X, k)
    f0 = f(X, k)
    out = _jump_part(f0, up, down, params.lambda_n.T[k], params.mu_n.T[k], params.gamma_n.T[k], z, q)
    Qs = params.env.scaled_Q
    for k2 in range(params.K):
        rate = Qs[k, k2]
        rate = np.where(k == k2, 0.0, rate)
        if np.any(rate > 0):
            out = out + rate * (f(X, np.full(N, k2)) - f0)
    return out if np.ndim(x) > 1 else float(out[0])


def corrector_constants(params) -> np.ndarray:
    """Constants ``c_kk'`` of the corrector ``g_k = n^-alpha sum c_kk' Delta_k'``."""
    return -np.array(params.analytics.Upsilon)


def poisson_corrector(params, f, x, policy) -> np.ndarray:
    """Solve ``sum_k' n^alpha q_kk' (g_k' - g_k) = Delta_k(x)`` for every
    environment ``k``; returns ``(K,)`` or ``(N, K)``."""
    X = np.atleast_2d(np.asarray(x, dtype=np.int64))
    K = params.K
    D = np.stack([delta_generator_apply(params, f, X, np.full(len(X), k), policy) for k in range(K)], axis=1)
    pi = params.analytics.pi
    centre = D @ pi
    scale = 1.0 + np.abs(D).max(axis=1)
    if np.any(np.abs(centre) > CENTERING_TOL * scale):
        i = int(np.argmax(np.abs(centre) / scale))
        raise NumericalError(
            f"environment-averaged delta does not vanish ({centre[i]:.3e}); inconsistent rate tables",
            residual=float(np.abs(centre[i])),
        )
    g = -(D @ params.analytics.Upsilon.T) / params.env.speed
    return g if np.ndim(x) > 1 else g[0]


# ---------------------------------------------------------------- scans


@dataclass
class ScanReport:
    variant: str
    n: int
    m: int
    alpha: float
    beta: float
    xi: list
    C1: float
    C2: float
    satisfied_fraction: float
    feasible: bool
    margin: float
    n_states: int
    worst_states: list = field(default_factory=list)
    region: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def scan_region(params, c0: float = 4.0, shell: tuple = (4.0, 8.0), shell_samples: int = 2000, rng=None):
    """Lattice points with ``|x - n rho|_inf <= c0 n^beta`` plus a random
    sample of the shell ``c_lo n^beta < |x - n rho|_inf <= c_hi n^beta``
    (all restricted to ``x >= 0``)."""
    dq = params.derive()
    n, d = params.n, params.d
    nb = n**dq.beta
    centre = n * dq.rho
    lo = np.maximum(np.ceil(centre - c0 * nb), 0).astype(np.int64)
    hi = np.floor(centre + c0 * nb).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    core = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    parts = [core]
    if shell is not None and shell_samples:
        rng = np.random.default_rng(0) if rng is None else rng
        c_lo, c_hi = shell
        pts = []
        while sum(len(p) for p in pts) < shell_samples:
            cand = np.rint(centre + rng.uniform(-c_hi * nb, c_hi * nb, size=(4 * shell_samples, d))).astype(np.int64)
            r = np.abs(cand - centre).max(axis=1) / nb
            cand = cand[(r > c_lo) & (r <= c_hi) & np.all(cand >= 0, axis=1)]
            pts.append(cand)
        parts.append(np.concatenate(pts)[:shell_samples])
    X = np.unique(np.concatenate(parts), axis=0)
    info = {"c0": c0, "shell": list(shell) if shell else None, "shell_samples": shell_samples, "core_points": len(core)}
    return X, info


def _fit_constants(LV, V, in_core, max_doublings=60, iters=80):
    """Largest ``C2 >= 0`` with ``LV <= C1 - C2 V`` everywhere, where
    ``C1 = max over the core of LV + C2 V``."""

    def check(C2):
        C1 = float(np.max(LV[in_core] + C2 * V[in_core]))
        slack = C1 - C2 * V - LV
        tol = 1e-9 * (1.0 + np.abs(LV) + C2 * np.abs(V))
        return C1, slack, slack >= -tol

    C1, slack, ok = check(0.0)
    if not ok.all():
        return 0.0, C1, slack, ok, False
    lo, hi = 0.0, 1.0
    for _ in range(max_doublings):
        if not check(hi)[2].all():
            break
        lo, hi = hi, 2 * hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if check(mid)[2].all():
            lo = mid
        else:
            hi = mid
    C1, slack, ok = check(lo)
    return lo, C1, slack, ok, True


def drift_inequality_scan(
    params,
    policy,
    m: int = 2,
    region=None,
    variant: str = "corrected",
    xi=None,
    core_radius: float = 1.0,
    c0: float = 4.0,
    shell_samples: int = 2000,
    rng=None,
    n_worst: int = 5,
) -> ScanReport:
    """Fit ``L V <= C1 - C2 V`` over a set of states.

    ``variant`` selects the function/operator pair:

    * ``"averaged"``: averaged generator on ``sum xi_i |xhat_i|^m``;
    * ``"raw"``: full generator on the same (environment-blind) function;
    * ``"corrected"``: full generator on that function plus the scaled
      Poisson corrector ``n^{-m beta} g_n[f_n](x, k)``.

    ``C1`` is the maximum of ``LV + C2 V`` over the core
    ``|xhat|_inf <= core_radius`` and ``C2`` the largest value for which the
    inequality holds at every scanned state. Failure is reported, not raised.
    """
    if variant not in ("averaged", "raw", "corrected"):
        raise ValidationError(f"unknown scan variant {variant!r}")
    dq = params.derive()
    n, K = params.n, params.K
    beta = dq.beta
    if xi is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            info = xi_weights(params, m, return_info=True)
        xi = info.xi
        notes = ["uniform xi (mu == gamma)"] if info.uniform_fallback else []
    else:
        notes = []
    spec = LyapunovSpec(m, xi, n)
    if region is None:
        X, reg = scan_region(params, c0=c0, shell_samples=shell_samples, rng=rng)
    else:
        X = np.atleast_2d(np.asarray(region, dtype=np.int64))
        reg = {"explicit_points": len(X)}
    scale = float(n) ** (-m * beta)

    def f_n(Y):
        return lyapunov_f(spec, Y, dq.rho)

    if variant == "averaged":
        LV = averaged_generator_apply(params, f_n, X, policy) * scale
        V = f_n(X) * scale
        states = [(x.tolist(), None) for x in X]
        Xall = X
    else:
        Xall = np.repeat(X, K, axis=0)
        kall = np.tile(np.arange(K), len(X))
        if variant == "raw":
            def F(Y, k):
                return f_n(Y) * scale
        else:
            def F(Y, k):
                g = poisson_corrector(params, f_n, Y, policy)
                return (f_n(Y) + g[np.arange(len(Y)), k]) * scale
        LV = full_generator_apply(params, F, Xall, kall, policy)
        V = F(Xall, kall)
        states = [(x.tolist(), int(k)) for x, k in zip(Xall, kall)]
    xhat = (Xall - n * dq.rho) / n**beta
    in_core = np.abs(xhat).max(axis=1) <= core_radius
    if not in_core.any():
        raise ValidationError("core ball contains no scanned state")
    C2, C1, slack, ok, feasible = _fit_constants(LV, V, in_core)
    order = np.argsort(slack)[:n_worst]
    worst = [{"x": states[i][0], "k": states[i][1], "slack": float(slack[i]), "LV": float(LV[i]), "V": float(V[i])} for i in order]
    reg = dict(reg, core_radius=core_radius)
    return ScanReport(
        variant=variant, n=n, m=m, alpha=params.alpha, beta=beta, xi=list(map(float, xi)),
        C1=float(C1), C2=float(C2), satisfied_fraction=float(ok.mean()), feasible=bool(feasible and C2 > 0),
        margin=float(slack.min()), n_states=len(V), worst_states=worst, region=reg, notes=notes,
    )


def compare_corrected(params, policy, m: int = 2, **kw) -> dict:
    """Paired raw/corrected scans over the same states."""
    raw = drift_inequality_scan(params, policy, m, variant="raw", **kw)
    cor = drift_inequality_scan(params, policy, m, variant="corrected", **kw)
    return {
        "raw": raw.to_dict(),
        "corrected": cor.to_dict(),
        "C2_improvement": cor.C2 - raw.C2,
        "corrected_not_worse": cor.C2 >= raw.C2,
    }
