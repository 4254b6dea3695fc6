"""Limiting controlled diffusion with piecewise-linear drift.

    dX = b(X, U) dt + sigma dW,
    b(x, u) = ell - M (x - <e,x>^+ u) - Gamma <e,x>^+ u

Controls are maps from R^d into the simplex ``{u >= 0, sum(u) = 1}``.
All evaluation routines accept either a single point ``(d,)`` or a batch
``(N, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import PolicyError, ValidationError

SIMPLEX_TOL = 1e-9
#: eigenvalues of Sigma below this are treated as zero
EIG_CLIP = 1e-12


def psd_sqrt(Sigma: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative round-off eigenvalues clipped."""
    Sigma = 0.5 * (Sigma + Sigma.T)
    w, V = np.linalg.eigh(Sigma)
    scale = max(1.0, np.abs(w).max(initial=0.0))
    if np.any(w < -1e-8 * scale):
        raise ValidationError(f"Sigma is not positive semidefinite (eigenvalues {w})")
    w = np.where(w < EIG_CLIP * scale, 0.0, w)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class DiffusionSpec:
    ell: np.ndarray
    M: np.ndarray
    Gamma: np.ndarray
    Sigma: np.ndarray
    sigma_factor: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        d = len(ell)
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        G = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        for name, A in (("M", M), ("Gamma", G), ("Sigma", S)):
            if A.shape != (d, d):
                raise ValidationError(f"{name} must be {d}x{d}, got {A.shape}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValidationError("Sigma must be symmetric")
        sf = psd_sqrt(S) if self.sigma_factor is None else np.atleast_2d(np.asarray(self.sigma_factor, float))
        if np.abs(sf @ sf.T - S).max() > 1e-10 * max(1.0, np.abs(S).max()):
            raise ValidationError("sigma_factor @ sigma_factor.T does not reproduce Sigma")
        for k, v in (("ell", ell), ("M", M), ("Gamma", G), ("Sigma", S), ("sigma_factor", sf)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @classmethod
    def from_derived(cls, dq) -> "DiffusionSpec":
        return cls(dq.ell, dq.M, dq.Gamma, dq.Sigma)

    @classmethod
    def from_params(cls, params) -> "DiffusionSpec":
        return cls.from_derived(params.derive())

    @property
    def d(self) -> int:
        return len(self.ell)

    @property
    def a(self) -> np.ndarray:
        """Second-order coefficient matrix of the generator (Sigma / 2)."""
        return 0.5 * self.Sigma

    @property
    def mu(self) -> np.ndarray:
        return np.diag(self.M)

    @property
    def gamma(self) -> np.ndarray:
        return np.diag(self.Gamma)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("ell", "M", "Gamma", "Sigma", "sigma_factor")}


# ---------------------------------------------------------------- controls


def check_simplex(u: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    u = np.atleast_2d(u)
    bad = (u.min(axis=1) < -tol) | (np.abs(u.sum(axis=1) - 1.0) > tol) | ~np.isfinite(u).all(axis=1)
    if np.any(bad):
        raise PolicyError("control returned a point off the simplex", state=u[bad][:3].tolist())


class MarkovControl:
    """Base class: subclasses implement ``_eval`` on an ``(N, d)`` batch."""

    d: int

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        U = self._eval(X)
        check_simplex(U)
        return U[0] if single else U

    def _eval(self, X):
        raise NotImplementedError


class ConstantControl(MarkovControl):
    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)
        check_simplex(self.u)
        self.d = len(self.u)

    def _eval(self, X):
        return np.broadcast_to(self.u, X.shape).copy()

    def __repr__(self):
        return f"ConstantControl({self.u.tolist()})"


class ClosureControl(MarkovControl):
    """Wraps ``fn(X) -> U`` on batches. Outputs are validated, never repaired."""

    def __init__(self, fn, d: int):
        self.fn = fn
        self.d = d

    def _eval(self, X):
        return np.asarray(self.fn(X), dtype=float).reshape(X.shape)

    def __repr__(self):
        return f"ClosureControl({getattr(self.fn, '__qualname__', 'callable')}, d={self.d})"


class GridControl(MarkovControl):
    """Multilinear interpolation of simplex values stored on a rectangular grid,
    renormalized onto the simplex. Points outside the box are clamped to it."""

    def __init__(self, axes, values):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        self.d = len(self.axes)
        shape = tuple(len(a) for a in self.axes)
        if self.values.shape != shape + (self.d,):
            raise ValidationError(f"values must have shape {shape + (self.d,)}, got {self.values.shape}")
        check_simplex(self.values.reshape(-1, self.d))
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])
        if all(len(a) > 1 for a in self.axes):
            self._interp = RegularGridInterpolator(self.axes, self.values, method="linear")
        else:
            self._interp = None

    def _eval(self, X):
        if self.d == 1:
            return np.ones_like(X)
        Xc = np.clip(X, self.lo, self.hi)
        U = self._interp(Xc)
        U = np.clip(U, 0.0, None)
        return U / U.sum(axis=1, keepdims=True)

    def __repr__(self):
        shape = tuple(len(a) for a in self.axes)
        return f"GridControl(shape={shape}, lo={self.lo.tolist()}, hi={self.hi.tolist()})"


class TruncatedControl(MarkovControl):
    """``base`` on the ball ``|x| <= R``, ``e_d`` outside ``|x| >= R(1+delta)``
    and the radial convex combination of the two on the annulus."""

    def __init__(self, base: MarkovControl, R: float, delta: float = 0.1):
        if not R > 0 or not delta > 0:
            raise ValidationError(f"need R > 0 and delta > 0, got R={R}, delta={delta}")
        self.base = base
        self.R = float(R)
        self.delta = float(delta)
        self.d = base.d

    def _eval(self, X):
        U = self.base(X)
        r = np.linalg.norm(X, axis=1)
        th = np.clip((r - self.R) / (self.R * self.delta), 0.0, 1.0)[:, None]
        U = (1.0 - th) * U
        U[:, -1] += th[:, 0]
        return U

    def __repr__(self):
        return f"TruncatedControl({self.base!r}, R={self.R}, delta={self.delta})"


def unit_vector(d: int, i: int) -> np.ndarray:
    e = np.zeros(d)
    e[i] = 1.0
    return e


# ---------------------------------------------------------------- dynamics


def drift(spec: DiffusionSpec, x, u) -> np.ndarray:
    """``ell - M(x - <e,x>^+ u) - Gamma <e,x>^+ u``; broadcasts over batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = np.maximum(x.sum(axis=-1, keepdims=True), 0.0)
    return spec.ell - spec.mu * (x - s * u) - spec.gamma * s * u


def _fd_grad_hess(f, x, h):
    d = len(x)
    I = np.eye(d) * h
    f0 = f(x)
    g = np.empty(d)
    H = np.empty((d, d))
    for i in range(d):
        fp, fm = f(x + I[i]), f(x - I[i])
        g[i] = (fp - fm) / (2 * h)
        H[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i + 1, d):
            H[i, j] = H[j, i] = (
                f(x + I[i] + I[j]) - f(x + I[i] - I[j]) - f(x - I[i] + I[j]) + f(x - I[i] - I[j])
            ) / (4 * h * h)
    return g, H


def generator_apply(spec: DiffusionSpec, f, x, u, grad=None, hess=None, h: float = 1e-4) -> float:
    """``<b(x,u), grad f(x)> + sum_ij a_ij d_ij f(x)`` with ``a = Sigma/2``.

    ``grad`` and ``hess`` are optional callables; missing derivatives are
    replaced by central differences with step ``h``.
    """
    x = np.asarray(x, dtype=float)
    if grad is None or hess is None:
        g_fd, H_fd = _fd_grad_hess(f, x, h)
    g = np.asarray(grad(x), dtype=float) if grad is not None else g_fd
    H = np.asarray(hess(x), dtype=float) if hess is not None else H_fd
    b = drift(spec, x, u)
    return float(b @ g + np.sum(spec.a * H))


@dataclass(frozen=True)
class DiffusionPath:
    """Euler path(s). ``X`` has shape ``(len(times), n_paths, d)``."""

    times: np.ndarray
    X: np.ndarray
    dt: float
    integrals: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.X[-1]

    def to_csv(self, path, which: int = 0) -> None:
        d = self.X.shape[2]
        header = "t," + ",".join(f"X_{i + 1}" for i in range(d))
        data = np.column_stack([self.times, self.X[:, which, :]])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def simulate_sde(
    spec: DiffusionSpec,
    control: MarkovControl,
    x0,
    T: float,
    dt: float,
    rng: np.random.Generator,
    n_paths: int = 1,
    record_every: int = 1,
    integrands: dict | None = None,
) -> DiffusionPath:
    """Euler-Maruyama paths ``X_{k+1} = X_k + b(X_k, v(X_k)) dt + sigma sqrt(dt) xi_k``.

    ``integrands`` maps names to ``fn(t, X, U) -> (n_paths,)``; their
    left-point Riemann sums over ``[0, T]`` are returned in ``integrals``.
    Only every ``record_every``-th state is kept (the terminal state always is).
    """
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if T < 0:
        raise ValidationError(f"T must be nonnegative, got {T}")
    d = spec.d
    X = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, d)).copy()
    nsteps = int(round(T / dt))
    if nsteps and abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValidationError(f"T={T} is not a multiple of dt={dt}")
    integrands = integrands or {}
    acc = {k: np.zeros(n_paths) for k in integrands}
    times = [0.0]
    rec = [X.copy()]
    sf_T = spec.sigma_factor.T * np.sqrt(dt)
    noisy = np.any(spec.sigma_factor != 0)
    for step in range(nsteps):
        t = step * dt
        U = control(X)
        for k, fn in integrands.items():
            acc[k] += fn(t, X, U) * dt
        X = X + drift(spec, X, U) * dt
        if noisy:
            X += rng.standard_normal((n_paths, d)) @ sf_T
        if (step + 1) % record_every == 0 or step + 1 == nsteps:
            times.append((step + 1) * dt)
            rec.append(X.copy())
    return DiffusionPath(np.array(times), np.stack(rec), dt, acc)
