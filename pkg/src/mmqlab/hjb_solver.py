"""Discounted and ergodic HJB equations of the limiting diffusion on a grid.

The diffusion is approximated by a continuous-time Markov chain on a lattice
(Kushner-Dupuis): upwind differences for the drift, central differences for
the diagonal of ``a = Sigma/2`` and the positively weighted seven-point
stencil for cross terms. Moves leaving the box are dropped, which makes the
boundary reflecting. Both problems are solved by policy iteration with
sparse direct solves.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .errors import NumericalError, ValidationError
from .limit_diffusion import DiffusionSpec, GridControl, MarkovControl, TruncatedControl

RESIDUAL_TOL = 1e-8
MAX_ITER = 500
GOLDEN_ITERS = 80
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``c |<e,x>^+ u|^m``. ``constant`` replaces it by a
    constant (used as a test hook; ``constant=0`` is the zero-cost case)."""

    c: float = 1.0
    m: float = 2.0
    constant: float | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError(f"cost coefficient c must be positive, got {self.c}")
        if not self.m >= 1:
            raise ValidationError(f"cost exponent m must be >= 1, got {self.m}")
        if self.constant is not None and not self.constant >= 0:
            raise ValidationError(f"constant cost must be nonnegative, got {self.constant}")

    @classmethod
    def zero(cls) -> "CostSpec":
        return cls(constant=0.0)

    def scaled(self, lam: float) -> "CostSpec":
        if self.constant is not None:
            return CostSpec(self.c, self.m, self.constant * lam)
        return CostSpec(self.c * lam, self.m)

    def to_dict(self) -> dict:
        return {"c": self.c, "m": self.m, "constant": self.constant}


def running_cost(cost: CostSpec, x, u) -> np.ndarray:
    """``c |<e,x>^+ u|^m`` (Euclidean norm); broadcasts over batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if cost.constant is not None:
        return np.full(x.shape[:-1], float(cost.constant)) if x.ndim > 1 else float(cost.constant)
    s = np.maximum(x.sum(axis=-1), 0.0)
    val = cost.c * (s * np.linalg.norm(u, axis=-1)) ** cost.m
    return val if np.ndim(val) else float(val)


# ---------------------------------------------------------------- Hamiltonian


def _psi(b, Dp, Dm):
    return np.where(b >= 0, b * Dp, b * Dm)


def _simplex_lattice(d: int, res: int) -> np.ndarray:
    pts = []
    for combo in combinations_with_replacement(range(d), res):
        pts.append(np.bincount(combo, minlength=d) / res)
    P = np.array(pts)
    # lexicographic order so ties resolve to the smallest candidate
    return P[np.lexsort(P.T[::-1])]


def _project_simplex(Y):
    """Euclidean projection of each row onto the simplex."""
    n, d = Y.shape
    S = -np.sort(-Y, axis=1)
    css = np.cumsum(S, axis=1) - 1.0
    k = np.arange(1, d + 1)
    cond = S - css / k > 0
    r = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), r] / (r + 1)
    return np.maximum(Y - tau[:, None], 0.0)


def minimize_control(beta, kappa, s, Dp, Dm, cm, m):
    """Minimize ``sum_i psi_i(beta_i + s kappa_i u_i) + cm s^m |u|^m`` over the
    simplex, row-wise. ``psi_i(b) = b Dp_i`` for ``b >= 0`` and ``b Dm_i``
    otherwise (``Dp = Dm = p`` gives the exact Hamiltonian).

    Returns ``(U, value)``. Rows with ``s = 0`` get ``e_d``.
    """
    beta = np.atleast_2d(beta)
    N, d = beta.shape
    kappa = np.broadcast_to(kappa, (N, d))
    Dp = np.broadcast_to(Dp, (N, d))
    Dm = np.broadcast_to(Dm, (N, d))
    s = np.broadcast_to(np.asarray(s, dtype=float), (N,))

    def F(U, rows=slice(None)):
        b = beta[rows] + s[rows, None] * kappa[rows] * U
        return _psi(b, Dp[rows], Dm[rows]).sum(axis=1) + cm * (s[rows] * np.linalg.norm(U, axis=1)) ** m

    U = np.zeros((N, d))
    U[:, -1] = 1.0
    if d == 1:
        return U, F(U)
    active = s > 0
    if not active.any():
        return U, F(U)
    ia = np.flatnonzero(active)
    if d == 2:
        U[ia] = _minimize_d2(beta[ia], kappa[ia], s[ia], Dp[ia], Dm[ia], cm, m)
    else:
        U[ia] = _minimize_general(lambda V, r=ia: F(V, r), len(ia), d, beta[ia], kappa[ia], s[ia], Dp[ia], Dm[ia], cm, m)
    return U, F(U)


def _minimize_d2(beta, kappa, s, Dp, Dm, cm, m):
    """Exact reduction to ``t = u_1`` in ``[0, 1]``: the objective is convex
    between the kinks where a drift component changes sign."""
    N = len(s)

    def f(t):
        U = np.stack([t, 1.0 - t], axis=1)
        b = beta + s[:, None] * kappa * U
        return _psi(b, Dp, Dm).sum(axis=1) + cm * (s * np.linalg.norm(U, axis=1)) ** m

    with np.errstate(divide="ignore", invalid="ignore"):
        k1 = -beta[:, 0] / (s * kappa[:, 0])
        k2 = 1.0 + beta[:, 1] / (s * kappa[:, 1])
    kinks = np.stack([np.zeros(N), k1, k2, np.ones(N)], axis=1)
    kinks = np.where(np.isfinite(kinks), np.clip(kinks, 0.0, 1.0), 0.0)
    kinks.sort(axis=1)
    cands = [kinks[:, j] for j in range(4)]
    for j in range(3):
        a, b = kinks[:, j].copy(), kinks[:, j + 1].copy()
        c1 = b - _INVPHI * (b - a)
        c2 = a + _INVPHI * (b - a)
        f1, f2 = f(c1), f(c2)
        for _ in range(GOLDEN_ITERS):
            left = f1 <= f2
            b = np.where(left, c2, b)
            a = np.where(left, a, c1)
            c2n = np.where(left, c1, a + _INVPHI * (b - a))
            c1n = np.where(left, b - _INVPHI * (b - a), c2)
            c1, c2 = c1n, c2n
            f1, f2 = f(c1), f(c2)
        cands.append(0.5 * (a + b))
        if m == 2 and cm > 0:
            # exact stationary point of linear + c s^2 (2t^2 - 2t + 1) on the piece
            lo, hi = kinks[:, j], kinks[:, j + 1]
            width = np.where(hi > lo, hi - lo, 1.0)
            quad = cm * s**2 * ((hi**2 - lo**2) * 2 - 2 * (hi - lo))
            slope = (f(hi) - f(lo) - quad) / width
            tq = (2 * cm * s**2 - slope) / (4 * cm * s**2)
            cands.append(np.clip(tq, lo, hi))
    T = np.stack(cands, axis=1)
    vals = np.stack([f(T[:, j]) for j in range(T.shape[1])], axis=1)
    best = vals.min(axis=1, keepdims=True)
    tol = 1e-12 * np.maximum(1.0, np.abs(best))
    # smallest u_1 among (near) optimal candidates
    t = np.where(vals <= best + tol, T, np.inf).min(axis=1)
    return np.stack([t, 1.0 - t], axis=1)


def _minimize_general(F, N, d, beta, kappa, s, Dp, Dm, cm, m, res=16, steps=200):
    """Simplex-lattice scan followed by projected (sub)gradient descent."""
    L = _simplex_lattice(d, res)
    vals = np.stack([F(np.broadcast_to(p, (N, d))) for p in L], axis=1)
    U = L[np.argmin(vals, axis=1)].copy()
    best = F(U)
    step = np.full(N, 0.25)
    for _ in range(steps):
        b = beta + s[:, None] * kappa * U
        dpsi = np.where(b >= 0, Dp, Dm) * s[:, None] * kappa
        nu = np.linalg.norm(U, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dnorm = np.where(nu[:, None] > 0, cm * m * s[:, None] ** m * nu[:, None] ** (m - 2) * U, 0.0)
        g = dpsi + dnorm
        g /= np.maximum(np.abs(g).max(axis=1, keepdims=True), 1e-300)
        Un = _project_simplex(U - step[:, None] * g)
        fn = F(Un)
        better = fn < best - 1e-15 * np.maximum(1.0, np.abs(best))
        U[better] = Un[better]
        best = np.where(better, fn, best)
        step = np.where(better, step, 0.5 * step)
        if step.max() < 1e-10:
            break
    return U


def hamiltonian_minimizer(spec: DiffusionSpec, cost: CostSpec, x, p):
    """Return ``(u*, H(x, p))`` with ``H = min_u <b(x,u), p> + R(x,u)``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    P = np.broadcast_to(p, X.shape)
    s = np.maximum(X.sum(axis=1), 0.0)
    base = spec.ell - spec.mu * X
    cm = 0.0 if cost.constant is not None else cost.c
    # u enters only through s (M - Gamma) u; the x-only part is linear in p
    U, g = minimize_control(np.zeros_like(X), spec.mu - spec.gamma, s, P, P, cm, cost.m)
    H = (base * P).sum(axis=1) + g
    if cost.constant is not None:
        H = H + cost.constant
    return (U[0], float(H[0])) if single else (U, H)


# ---------------------------------------------------------------- grid


@dataclass(frozen=True)
class Grid:
    """Lattice ``h * Z^d`` intersected with the box ``[lo, hi]``; always
    contains the origin."""

    lo: np.ndarray
    hi: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        h = np.broadcast_to(np.asarray(self.h, dtype=float), lo.shape).copy()
        if lo.shape != hi.shape:
            raise ValidationError("lo and hi must have the same length")
        if np.any(h <= 0):
            raise ValidationError(f"mesh widths must be positive, got {h}")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValidationError("the box must contain the origin")
        for k, v in (("lo", lo), ("hi", hi), ("h", h)):
            object.__setattr__(self, k, v)

    @classmethod
    def box(cls, half_width, h, d: int | None = None) -> "Grid":
        w = np.atleast_1d(np.asarray(half_width, dtype=float))
        if d is not None:
            w = np.broadcast_to(w, (d,)).copy()
        return cls(-w, w, h)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def axes(self) -> list:
        out = []
        for lo, hi, h in zip(self.lo, self.hi, self.h):
            k0 = int(np.ceil(lo / h - 1e-9))
            k1 = int(np.floor(hi / h + 1e-9))
            out.append(h * np.arange(k0, k1 + 1))
        return out

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def origin_index(self) -> int:
        idx = [int(np.argmin(np.abs(a))) for a in self.axes]
        return int(np.ravel_multi_index(idx, self.shape))

    def enlarged(self, factor: float) -> "Grid":
        return Grid(self.lo * factor, self.hi * factor, self.h)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "h": self.h.tolist(), "shape": list(self.shape)}


class _Stencil:
    """Neighbour structure and drift-independent rates of the chain."""

    def __init__(self, spec: DiffusionSpec, grid: Grid):
        self.spec, self.grid = spec, grid
        shape = grid.shape
        d = grid.d
        N = grid.size
        self.N = N
        self.X = grid.points
        multi = np.array(np.unravel_index(np.arange(N), shape)).T  # N x d
        self.multi = multi

        def neighbour(offset):
            tgt = multi + offset
            ok = np.all((tgt >= 0) & (tgt < np.array(shape)), axis=1)
            idx = np.full(N, -1)
            idx[ok] = np.ravel_multi_index(tgt[ok].T, shape)
            return idx

        self.plus = [neighbour(np.eye(d, dtype=int)[i]) for i in range(d)]
        self.minus = [neighbour(-np.eye(d, dtype=int)[i]) for i in range(d)]
        a = spec.a
        h = grid.h
        rows, cols, vals = [], [], []
        self.monotone = True
        for i in range(d):
            off = sum(abs(a[i, j]) / (h[i] * h[j]) for j in range(d) if j != i)
            r = a[i, i] / h[i] ** 2 - off
            if r < -1e-12 * max(1.0, a[i, i] / h[i] ** 2):
                self.monotone = False
                warnings.warn(
                    f"diffusion stencil not monotone on axis {i} (a_ii/h^2={a[i, i] / h[i] ** 2:.3g} < "
                    f"off-diagonal weight {off:.3g}); negative weights clipped to 0",
                    RuntimeWarning,
                    stacklevel=3,
                )
            r = max(r, 0.0)
            for nb in (self.plus[i], self.minus[i]):
                ok = nb >= 0
                rows.append(np.flatnonzero(ok))
                cols.append(nb[ok])
                vals.append(np.full(ok.sum(), r))
        for i in range(d):
            for j in range(i + 1, d):
                if a[i, j] == 0:
                    continue
                w = abs(a[i, j]) / (h[i] * h[j])
                sgn = 1 if a[i, j] > 0 else -1
                e = np.eye(d, dtype=int)
                for off in (e[i] + sgn * e[j], -e[i] - sgn * e[j]):
                    nb = neighbour(off)
                    ok = nb >= 0
                    rows.append(np.flatnonzero(ok))
                    cols.append(nb[ok])
                    vals.append(np.full(ok.sum(), w))
        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        cols = np.concatenate(cols) if cols else np.zeros(0, int)
        vals = np.concatenate(vals) if vals else np.zeros(0)
        self.diff_rates = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
        # base drift (u-independent) and the u-coefficient s (M - Gamma)
        self.s = np.maximum(self.X.sum(axis=1), 0.0)
        self.beta = spec.ell - spec.mu * self.X
        self.kappa = spec.mu - spec.gamma

    def drift(self, U):
        return self.beta + self.s[:, None] * self.kappa * U

    def generator(self, U) -> sp.csr_matrix:
        """Sparse generator ``G_u`` (rows sum to zero)."""
        B = self.drift(U)
        h = self.grid.h
        rows, cols, vals = [], [], []
        for i in range(self.grid.d):
            bp = np.maximum(B[:, i], 0.0) / h[i]
            bm = np.maximum(-B[:, i], 0.0) / h[i]
            for nb, r in ((self.plus[i], bp), (self.minus[i], bm)):
                ok = (nb >= 0) & (r > 0)
                rows.append(np.flatnonzero(ok))
                cols.append(nb[ok])
                vals.append(r[ok])
        D = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.N, self.N)
        )
        G = self.diff_rates + D
        out = np.asarray(G.sum(axis=1)).ravel()
        return (G - sp.diags(out)).tocsr()

    def differences(self, V):
        """One-sided differences; missing neighbours (reflecting edge) give 0."""
        d = self.grid.d
        Dp = np.zeros((self.N, d))
        Dm = np.zeros((self.N, d))
        for i in range(d):
            p, m = self.plus[i], self.minus[i]
            Dp[:, i] = np.where(p >= 0, (V[np.maximum(p, 0)] - V) / self.grid.h[i], 0.0)
            Dm[:, i] = np.where(m >= 0, (V - V[np.maximum(m, 0)]) / self.grid.h[i], 0.0)
        return Dp, Dm

    def improve(self, V, cost: CostSpec):
        """Pointwise argmin of ``G_u V + r_u`` and the minimal value."""
        Dp, Dm = self.differences(V)
        cm = 0.0 if cost.constant is not None else cost.c
        U, g = minimize_control(self.beta, self.kappa, self.s, Dp, Dm, cm, cost.m)
        diffV = self.diff_rates @ V - np.asarray(self.diff_rates.sum(axis=1)).ravel() * V
        r = self.cost(U, cost)
        val = diffV + g + (r if cost.constant is not None else 0.0)
        return U, val

    def cost(self, U, cost: CostSpec):
        if cost.constant is not None:
            return np.full(self.N, float(cost.constant))
        return cost.c * (self.s * np.linalg.norm(U, axis=1)) ** cost.m


def discrete_generator_apply(spec: DiffusionSpec, grid: Grid, U, f_values) -> np.ndarray:
    """Apply the chain generator ``G_u`` to grid values of a function."""
    st = _Stencil(spec, grid)
    U = np.broadcast_to(np.asarray(U, dtype=float), (st.N, grid.d))
    return st.generator(U) @ np.asarray(f_values, dtype=float).ravel()


def transition_weights(spec: DiffusionSpec, grid: Grid, U) -> sp.csr_matrix:
    """Off-diagonal rates of ``G_u``; all entries are nonnegative for a
    monotone stencil."""
    st = _Stencil(spec, grid)
    G = st.generator(np.broadcast_to(np.asarray(U, dtype=float), (st.N, grid.d)))
    return (G - sp.diags(G.diagonal())).tocsr()


# ---------------------------------------------------------------- solvers


@dataclass(frozen=True)
class GridValueFunction:
    grid: Grid
    values: np.ndarray
    control: np.ndarray
    criterion: str
    theta: float | None = None
    rho_star: float | None = None
    residual: float = np.nan
    iterations: int = 0
    history: list = field(default_factory=list)
    monotone: bool = True

    def as_control(self) -> MarkovControl:
        return GridControl(self.grid.axes, self.control)

    def truncated_control(self, R: float, delta: float = 0.1) -> MarkovControl:
        return epsilon_truncation(self.as_control(), R, delta)

    def value_at(self, x) -> np.ndarray:
        interp = RegularGridInterpolator(self.grid.axes, self.values, bounds_error=False, fill_value=None)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return interp(np.clip(x, self.grid.lo, self.grid.hi))

    @property
    def value_at_origin(self) -> float:
        return float(self.values.ravel()[self.grid.origin_index])

    def metadata(self) -> dict:
        return {
            "criterion": self.criterion,
            "theta": self.theta,
            "rho_star": self.rho_star,
            "value_at_origin": self.value_at_origin,
            "residual": self.residual,
            "iterations": self.iterations,
            "residual_history": list(self.history),
            "monotone": self.monotone,
            "grid": self.grid.to_dict(),
        }

    def to_csv(self, path) -> None:
        d = self.grid.d
        P = self.grid.points
        V = self.values.ravel()
        U = self.control.reshape(-1, d)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(d)] + ["V"] + [f"u_{i + 1}" for i in range(d)])
            for k in range(len(V)):
                w.writerow([repr(float(a)) for a in P[k]] + [repr(float(V[k]))] + [repr(float(a)) for a in U[k]])


def _initial_control(N, d):
    U = np.zeros((N, d))
    U[:, -1] = 1.0
    return U


def _policy_iteration(st: _Stencil, cost: CostSpec, solve, residual_of, tol, max_iter, U0):
    U = _initial_control(st.N, st.grid.d) if U0 is None else np.array(U0, dtype=float).reshape(st.N, -1)
    history = []
    sol = solve(U)
    for it in range(1, max_iter + 1):
        Un, best = st.improve(sol[0], cost)
        res = residual_of(sol, best)
        history.append(res)
        if res < tol:
            return U, sol, res, it, history
        # keep the incumbent action where the new one is not strictly better
        cur = (st.generator(U) @ sol[0]) + st.cost(U, cost)
        keep = best >= cur - 1e-13 * np.maximum(1.0, np.abs(cur))
        Un[keep] = U[keep]
        if np.all(keep):
            return U, sol, res, it, history
        U = Un
        sol = solve(U)
    raise NumericalError(
        f"policy iteration did not converge in {max_iter} iterations (residual {history[-1]:.3e})",
        residual=history[-1],
        history=history,
    )


def solve_discounted(
    spec: DiffusionSpec,
    cost: CostSpec,
    theta: float,
    grid: Grid,
    tol: float = RESIDUAL_TOL,
    max_iter: int = MAX_ITER,
    U0=None,
) -> GridValueFunction:
    """Solve ``min_u [G_u V + R] = theta V`` by policy iteration."""
    if not theta > 0:
        raise ValidationError(f"discount rate must be positive, got {theta}")
    if grid.d != spec.d:
        raise ValidationError(f"grid dimension {grid.d} != model dimension {spec.d}")
    st = _Stencil(spec, grid)
    I = sp.identity(st.N, format="csr")

    def solve(U):
        V = spla.spsolve((theta * I - st.generator(U)).tocsc(), st.cost(U, cost))
        return (np.asarray(V),)

    def residual_of(sol, best):
        return float(np.abs(best - theta * sol[0]).max())

    U, (V,), res, it, hist = _policy_iteration(st, cost, solve, residual_of, tol, max_iter, U0)
    # clip round-off; the exact discrete solution is nonnegative
    V = np.where(np.abs(V) < 1e-12 * max(1.0, np.abs(V).max()), np.abs(V), V)
    return GridValueFunction(
        grid, V.reshape(grid.shape), U.reshape(grid.shape + (grid.d,)), "discounted",
        theta=float(theta), residual=res, iterations=it, history=hist, monotone=st.monotone,
    )


def solve_ergodic(
    spec: DiffusionSpec,
    cost: CostSpec,
    grid: Grid,
    tol: float = RESIDUAL_TOL,
    max_iter: int = MAX_ITER,
    U0=None,
    anchor: int | None = None,
) -> GridValueFunction:
    """Solve ``min_u [G_u V + R] = rho`` with ``V(anchor) = 0`` (the origin
    by default) by policy iteration on the bordered linear system."""
    if grid.d != spec.d:
        raise ValidationError(f"grid dimension {grid.d} != model dimension {spec.d}")
    st = _Stencil(spec, grid)
    N = st.N
    k0 = grid.origin_index if anchor is None else int(anchor)
    ones = sp.csr_matrix(np.ones((N, 1)))
    e0 = sp.csr_matrix(([1.0], ([0], [k0])), shape=(1, N))

    def solve(U):
        A = sp.bmat([[st.generator(U), -ones], [e0, None]], format="csc")
        rhs = np.append(-st.cost(U, cost), 0.0)
        z = spla.spsolve(A, rhs)
        if not np.all(np.isfinite(z)):
            raise NumericalError("singular bordered system in ergodic solve")
        return (z[:N], float(z[N]))

    def residual_of(sol, best):
        return float(np.abs(best - sol[1]).max())

    U, (V, rho), res, it, hist = _policy_iteration(st, cost, solve, residual_of, tol, max_iter, U0)
    return GridValueFunction(
        grid, V.reshape(grid.shape), U.reshape(grid.shape + (grid.d,)), "ergodic",
        rho_star=rho, residual=res, iterations=it, history=hist, monotone=st.monotone,
    )


def epsilon_truncation(v: MarkovControl, R: float, delta: float = 0.1) -> MarkovControl:
    """``v`` on the ball of radius ``R``, ``e_d`` beyond ``R(1+delta)`` and
    the radial blend in between."""
    return TruncatedControl(v, R, delta)
