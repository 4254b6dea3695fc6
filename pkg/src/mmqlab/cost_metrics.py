"""Cost estimators, occupation measures and optimality gaps.

Sources accepted by the estimators:

* :class:`~mmqlab.prelimit_sim.JointTrajectory` (one exact prelimit path),
* :class:`~mmqlab.prelimit_sim.EnsembleResult` (independent replications),
* :class:`~mmqlab.limit_diffusion.DiffusionPath` (Euler paths; the control
  must be supplied to evaluate the running cost).

Confidence intervals come from independent replications when there are
several, and from batch means on a single long path otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ValidationError
from .hjb_solver import CostSpec, Grid, _simplex_lattice, running_cost, solve_ergodic
from .limit_diffusion import DiffusionPath, DiffusionSpec
from .prelimit_sim import EnsembleResult, JointTrajectory, OmegaControl, initial_state, simulate_ensemble

N_BATCHES = 20
MIN_BATCHES = 10
CONFIDENCE = 0.95


@dataclass(frozen=True)
class Estimate:
    value: float
    half_width: float
    n: int
    method: str

    @property
    def ci(self) -> tuple:
        return (self.value - self.half_width, self.value + self.half_width)

    @property
    def se(self) -> float:
        if self.n < 2:
            return float("nan")
        return self.half_width / stats.t.ppf(0.5 + CONFIDENCE / 2, self.n - 1)

    def to_dict(self) -> dict:
        return {"value": self.value, "half_width": self.half_width, "n": self.n, "method": self.method}


def mean_ci(samples, method: str = "replications", confidence: float = CONFIDENCE) -> Estimate:
    x = np.asarray(samples, dtype=float).ravel()
    n = len(x)
    if n == 0:
        raise ValidationError("no samples")
    if n == 1:
        return Estimate(float(x[0]), float("nan"), 1, method)
    hw = stats.t.ppf(0.5 + confidence / 2, n - 1) * x.std(ddof=1) / np.sqrt(n)
    return Estimate(float(x.mean()), float(hw), n, method)


@dataclass
class ExperimentReport:
    label: str
    params_digest: str
    metric: str
    estimate: Estimate
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "params_digest": self.params_digest,
            "metric": self.metric,
            "value": self.estimate.value,
            "ci_half_width": self.estimate.half_width,
            "replications": self.estimate.n,
            "method": self.estimate.method,
            "seeds": [int(s) for s in self.seeds],
            **self.extra,
        }


# ---------------------------------------------------------------- path views


def _trajectory_segments(traj: JointTrajectory):
    """Left endpoints, right endpoints, scaled state and scaled queue."""
    t0 = traj.times
    t1 = np.append(traj.times[1:], traj.T)
    nb = float(traj.n) ** traj.beta
    Xh = (traj.X - traj.n * np.asarray(traj.rho)) / nb
    Qh = traj.Qv / nb
    return t0, t1, Xh, Qh


def _trajectory_cost(traj, cost: CostSpec):
    _, _, _, Qh = _trajectory_segments(traj)
    if cost.constant is not None:
        return np.full(len(Qh), float(cost.constant))
    return cost.c * np.linalg.norm(Qh, axis=1) ** cost.m


def _path_costs(path: DiffusionPath, cost: CostSpec, control):
    """Running cost at recorded states, shape ``(steps, paths)``."""
    X = path.X
    if cost.constant is not None:
        return np.full(X.shape[:2], float(cost.constant))
    if control is None:
        raise ValidationError("the control is needed to evaluate the running cost on a diffusion path")
    S, P, d = X.shape
    U = control(X.reshape(-1, d)).reshape(S, P, d)
    return running_cost(cost, X, U)


def _uhat(Qh):
    tot = Qh.sum(axis=1, keepdims=True)
    d = Qh.shape[1]
    ed = np.zeros(d)
    ed[-1] = 1.0
    return np.where(tot > 0, Qh / np.where(tot > 0, tot, 1.0), ed)


# ---------------------------------------------------------------- estimators


def sde_cost_integrands(cost: CostSpec, theta: float | None = None) -> dict:
    """Integrands for :func:`~mmqlab.limit_diffusion.simulate_sde` that
    accumulate the running cost (and its discounted version)."""

    def r(t, X, U):
        return running_cost(cost, X, U)

    out = {"cost": r}
    if theta is not None:
        out["disc_cost"] = lambda t, X, U: np.exp(-theta * t) * running_cost(cost, X, U)
    return out


def _tail_check(theta, T, late_level, tol):
    tail = np.exp(-theta * T) * late_level / theta
    if tail > tol / 2:
        raise ValidationError(
            f"horizon T={T} too short: tail estimate e^(-theta T) R_late / theta = {tail:.3e} > tol/2 = {tol / 2:.3e}"
        )
    return tail


def discounted_cost(source, cost: CostSpec, theta: float, control=None, tol: float = 1e-3) -> Estimate:
    """``E int_0^T e^{-theta s} R ds`` averaged over replications.

    The horizon ``T`` of the source must make the tail
    ``e^{-theta T} R_late / theta`` smaller than ``tol / 2``, where
    ``R_late`` is the mean running cost over the last tenth of the horizon.
    """
    if not theta > 0:
        raise ValidationError(f"discount rate must be positive, got {theta}")
    if isinstance(source, EnsembleResult):
        if source.theta != theta:
            raise ValidationError(f"ensemble was discounted at theta={source.theta}, not {theta}")
        late = np.mean(source.avg_cost())
        _tail_check(theta, source.T, late, tol)
        return mean_ci(source.disc_cost)
    if isinstance(source, JointTrajectory):
        source = [source]
    if isinstance(source, (list, tuple)):
        vals, lates = [], []
        for tr in source:
            t0, t1, _, _ = _trajectory_segments(tr)
            r = _trajectory_cost(tr, cost)
            vals.append(r @ ((np.exp(-theta * t0) - np.exp(-theta * t1)) / theta))
            w = np.clip(t1 - np.maximum(t0, 0.9 * tr.T), 0.0, None)
            lates.append((w @ r) / (0.1 * tr.T))
        _tail_check(theta, source[0].T, float(np.mean(lates)), tol)
        return mean_ci(vals)
    if isinstance(source, DiffusionPath):
        T = source.times[-1]
        if "disc_cost" in source.integrals:
            vals = source.integrals["disc_cost"]
            late = np.mean(source.integrals.get("cost", vals)) / T
        else:
            R = _path_costs(source, cost, control)
            dt = np.diff(source.times)
            w = np.exp(-theta * source.times[:-1]) * dt
            vals = w @ R[:-1]
            late_mask = source.times[:-1] >= 0.9 * T
            late = float(R[:-1][late_mask].mean()) if late_mask.any() else float(R[-1].mean())
        _tail_check(theta, T, late, tol)
        return mean_ci(vals)
    raise ValidationError(f"unsupported source type {type(source).__name__}")


def _batch_means(t0, t1, r, lo, hi, n_batches):
    if n_batches < MIN_BATCHES:
        raise ValidationError(f"need at least {MIN_BATCHES} batches, got {n_batches}")
    edges = np.linspace(lo, hi, n_batches + 1)
    means = np.empty(n_batches)
    for b in range(n_batches):
        w = np.clip(np.minimum(t1, edges[b + 1]) - np.maximum(t0, edges[b]), 0.0, None)
        means[b] = (w @ r) / (edges[b + 1] - edges[b])
    return means


def ergodic_cost(
    source, cost: CostSpec, burn_in: float | None = None, n_batches: int = N_BATCHES, control=None
) -> Estimate:
    """Long-run average of the running cost over ``[burn_in, T]``.

    A single path is split into ``n_batches`` batches (default burn-in
    ``T/10``); several replications give a replication CI.
    """
    if isinstance(source, EnsembleResult):
        if source.n_reps == 1:
            raise ValidationError("one replication: use a trajectory for batch means")
        return mean_ci(source.avg_cost())
    if isinstance(source, JointTrajectory):
        T = source.T
        burn_in = T / 10 if burn_in is None else burn_in
        if not T > burn_in:
            raise ValidationError(f"need T > burn_in, got T={T}, burn_in={burn_in}")
        t0, t1, _, _ = _trajectory_segments(source)
        r = _trajectory_cost(source, cost)
        return mean_ci(_batch_means(t0, t1, r, burn_in, T, n_batches), method="batch_means")
    if isinstance(source, DiffusionPath):
        T = source.times[-1]
        burn_in = T / 10 if burn_in is None else burn_in
        if not T > burn_in:
            raise ValidationError(f"need T > burn_in, got T={T}, burn_in={burn_in}")
        R = _path_costs(source, cost, control)[:-1]
        t0 = source.times[:-1]
        t1 = source.times[1:]
        if R.shape[1] > 1:
            keep = t0 >= burn_in
            dt = (t1 - t0)[keep]
            return mean_ci(dt @ R[keep] / dt.sum())
        return mean_ci(_batch_means(t0, t1, R[:, 0], burn_in, T, n_batches), method="batch_means")
    raise ValidationError(f"unsupported source type {type(source).__name__}")


def moment_report(source, orders=(1, 2), burn_in: float | None = None, n_batches: int = N_BATCHES) -> dict:
    """Time-averaged ``|Xhat|^p`` for each order ``p``."""
    orders = list(orders)
    if isinstance(source, EnsembleResult):
        idx = {float(o): i for i, o in enumerate(source.moment_orders)}
        A = source.avg_moments()
        return {p: mean_ci(A[:, idx[float(p)]]) for p in orders}
    if isinstance(source, JointTrajectory):
        t0, t1, Xh, _ = _trajectory_segments(source)
        T = source.T
        xn = np.linalg.norm(Xh, axis=1)
    elif isinstance(source, DiffusionPath):
        if source.X.shape[1] != 1:
            raise ValidationError("moment_report on diffusion paths expects a single path")
        T = source.times[-1]
        t0, t1 = source.times[:-1], source.times[1:]
        xn = np.linalg.norm(source.X[:-1, 0, :], axis=1)
    else:
        raise ValidationError(f"unsupported source type {type(source).__name__}")
    burn_in = 0.0 if burn_in is None else burn_in
    return {p: mean_ci(_batch_means(t0, t1, xn**p, burn_in, T, n_batches), method="batch_means") for p in orders}


# ---------------------------------------------------------------- empirical measure


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Occupation histogram of ``(Xhat, Uhat)``.

    ``edges[i]`` are the bin edges of state axis ``i``; the first and last
    bins are overflow bins reaching out to the observed extremes.
    ``controls`` are the simplex-lattice points used as control bins and
    ``weights`` has shape ``(len(edges[0]) - 1, ..., len(controls))``.
    """

    edges: list
    controls: np.ndarray
    weights: np.ndarray
    T: float
    samples: np.ndarray = field(repr=False)
    sample_weights: np.ndarray = field(repr=False)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def state_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=-1)

    def integrate_cost(self, cost: CostSpec) -> tuple:
        """``(midpoint value, error bound)`` of ``int R dzeta``. The bound
        uses the largest deviation of ``R`` between a bin's midpoint and its
        corners, which is exact for costs monotone along each axis."""
        d = len(self.edges)
        mids = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        shape = self.weights.shape
        total = 0.0
        err = 0.0
        grids = np.meshgrid(*mids, indexing="ij")
        M = np.stack([g.ravel() for g in grids], axis=1)
        corner_sets = []
        for c in range(1 << d):
            pts = [self.edges[i][1:] if (c >> i) & 1 else self.edges[i][:-1] for i in range(d)]
            g = np.meshgrid(*pts, indexing="ij")
            corner_sets.append(np.stack([a.ravel() for a in g], axis=1))
        W = self.weights.reshape(-1, shape[-1])
        for j, u in enumerate(self.controls):
            Ru = running_cost(cost, M, np.broadcast_to(u, M.shape))
            Rc = np.stack([running_cost(cost, C, np.broadcast_to(u, C.shape)) for C in corner_sets], axis=1)
            total += W[:, j] @ Ru
            err += W[:, j] @ np.abs(Rc - Ru[:, None]).max(axis=1)
        return float(total), float(err)


def mean_empirical_measure(
    source, T: float | None = None, bins: int = 64, width: float = 6.0, control_res: int = 8, control=None
) -> EmpiricalMeasure:
    """Occupation measure over ``[0, T]`` normalized to unit mass.

    State bins: ``bins`` per axis over ``mean +- width * std`` plus two
    overflow bins. Controls snap to the nearest simplex-lattice point of
    resolution ``1/control_res``.
    """
    if isinstance(source, JointTrajectory):
        t0, t1, Xh, Qh = _trajectory_segments(source)
        T = source.T if T is None else T
        w = np.clip(np.minimum(t1, T) - t0, 0.0, None)
        U = _uhat(Qh)
    elif isinstance(source, DiffusionPath):
        if control is None:
            raise ValidationError("the control is needed for the control marginal of a diffusion path")
        T = source.times[-1] if T is None else T
        t0, t1 = source.times[:-1], source.times[1:]
        Xh = source.X[:-1, 0, :]
        w = np.clip(np.minimum(t1, T) - t0, 0.0, None)
        U = control(Xh)
    else:
        raise ValidationError(f"unsupported source type {type(source).__name__}")
    keep = w > 0
    Xh, U, w = Xh[keep], U[keep], w[keep]
    d = Xh.shape[1]
    p = w / w.sum()
    mu = p @ Xh
    sd = np.sqrt(np.maximum(p @ (Xh - mu) ** 2, 0.0))
    edges = []
    for i in range(d):
        s = sd[i] if sd[i] > 0 else 1.0
        inner = np.linspace(mu[i] - width * s, mu[i] + width * s, bins + 1)
        lo = min(Xh[:, i].min(), inner[0]) - 1e-12
        hi = max(Xh[:, i].max(), inner[-1]) + 1e-12
        edges.append(np.concatenate([[lo], inner, [hi]]))
    L = _simplex_lattice(d, control_res) if d > 1 else np.ones((1, 1))
    cidx = np.argmin(((U[:, None, :] - L[None, :, :]) ** 2).sum(axis=2), axis=1)
    sidx = [np.clip(np.searchsorted(edges[i], Xh[:, i], side="right") - 1, 0, len(edges[i]) - 2) for i in range(d)]
    shape = tuple(len(e) - 1 for e in edges) + (len(L),)
    W = np.zeros(shape)
    np.add.at(W, tuple(sidx) + (cidx,), p)
    return EmpiricalMeasure(edges, L, W, float(T), Xh, p)


def w1_distance(a, b, a_weights=None, b_weights=None) -> float:
    """Wasserstein-1 distance between two weighted 1-d samples."""
    return float(stats.wasserstein_distance(np.ravel(a), np.ravel(b), a_weights, b_weights))


# ---------------------------------------------------------------- optimality gap


@dataclass
class GapRow:
    n: int
    cost: Estimate
    gap: float
    rho_star: float
    events_per_rep: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "cost": self.cost.value,
            "cost_ci_half_width": self.cost.half_width,
            "gap": self.gap,
            "rho_star": self.rho_star,
            "lower_bound_ok": bool(self.gap >= -2 * self.cost.half_width),
            "replications": self.cost.n,
            "events_per_rep": self.events_per_rep,
        }


def optimality_gap(
    params,
    cost: CostSpec,
    grid: Grid,
    n_list,
    T: float,
    reps: int,
    seed: int,
    burn_in: float | None = None,
    R: float | None = None,
    delta: float = 0.1,
    threads: int = 1,
    solution=None,
) -> dict:
    """Simulated ergodic cost of the omega-mapped HJB control for each ``n``
    against ``rho_*``. ``R`` is the truncation radius (defaults to 0.8 times
    the smallest half-width of the grid box)."""
    spec = DiffusionSpec.from_params(params)
    if solution is None:
        solution = solve_ergodic(spec, cost, grid)
    rho_star = float(solution.rho_star)
    if R is None:
        R = 0.8 * float(min(np.min(-grid.lo), np.min(grid.hi)))
    v = solution.truncated_control(R, delta)
    policy = OmegaControl(v)
    burn_in = T / 10 if burn_in is None else burn_in
    rows = []
    for i, n in enumerate(n_list):
        p_n = params.with_n(int(n))
        x0 = initial_state(p_n, np.zeros(params.d))
        ens = simulate_ensemble(
            p_n, policy, T, x0, np.random.SeedSequence(int(seed), spawn_key=(i,)).generate_state(1)[0],
            reps, burn_in=burn_in, cost=cost, threads=threads,
        )
        est = mean_ci(ens.avg_cost())
        rows.append(GapRow(int(n), est, est.value - rho_star, rho_star, float(ens.n_events.mean())))
    gaps = [r.gap for r in rows]
    return {
        "rho_star": rho_star,
        "truncation_radius": R,
        "delta": delta,
        "rows": [r.to_dict() for r in rows],
        "lower_bound_ok": all(r.gap >= -2 * r.cost.half_width for r in rows),
        "gaps_non_increasing": all(b <= a for a, b in zip(gaps, gaps[1:])),
        "hjb": solution.metadata(),
    }
