"""Event-driven simulation of the Markov-modulated many-server queue.

The joint chain ``(X, J)`` is sampled exactly (direct-method Gillespie).
Between events all rates are constant, so re-assigning servers only at event
epochs is exact for preemptive policies.

Two engines are provided:

* :func:`simulate` runs one path in a scalar loop, accepts any policy
  (including Python callbacks) and records the full trajectory.
* :func:`simulate_ensemble` runs many independent replications of the
  built-in policies in a compiled loop and keeps only snapshots and time
  integrals. It is the workhorse for Monte Carlo studies.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import PolicyError, ValidationError
from .limit_diffusion import MarkovControl

# ---------------------------------------------------------------- policies


def static_priority_assign(x, n: int):
    """Fill servers in class order: ``z_i = x_i ^ (n - sum_{i'<i} x_i')^+``."""
    x = np.asarray(x)
    prefix = np.cumsum(x, axis=-1) - x
    z = np.minimum(x, np.clip(n - prefix, 0, None))
    return z, x - z


def omega_round(y):
    """Mass-preserving floor: floor every coordinate and move the total
    fractional mass onto the last one. The last coordinate is snapped to an
    integer when the total mass is an integer up to round-off."""
    y = np.asarray(y, dtype=float)
    fl = np.floor(y)
    out = fl.copy()
    total = y.sum(axis=-1)
    out[..., -1] = total - fl[..., :-1].sum(axis=-1)
    rt = np.round(total)
    snap = np.abs(total - rt) <= 1e-12 * np.maximum(1.0, np.abs(total))
    out[..., -1] = np.where(snap, rt - fl[..., :-1].sum(axis=-1), out[..., -1])
    return out


def _repair_queue(q, x):
    """Clip ``q`` to ``x`` and hand the clipped mass to the remaining classes,
    last class first. Keeps the queue total unchanged."""
    over = np.clip(q - x, 0, None)
    if not over.any():
        return q, 0
    q = np.minimum(q, x)
    deficit = over.sum(axis=-1)
    for i in range(q.shape[-1] - 1, -1, -1):
        take = np.minimum(x[..., i] - q[..., i], deficit)
        q[..., i] += take
        deficit = deficit - take
    return q, int((over.sum(axis=-1) > 0).sum())


def omega_control_assign(x, n: int, v: MarkovControl, kappa: float, rho, beta: float, return_info=False):
    """Queue split driven by a Markov control of the scaled state.

    Near the fluid point (``max_i |x_i - n rho_i| <= kappa n``) the queue is
    ``omega((<e,x> - n)^+ v(xhat))``; elsewhere the static-priority queue is
    used. When rounding would queue more class-i customers than are present
    the excess is moved to other classes (see :func:`_repair_queue`).
    """
    rho = np.asarray(rho, dtype=float)
    if not 0 < kappa < rho.min():
        raise PolicyError(f"kappa must lie in (0, min rho) = (0, {rho.min()}), got {kappa}")
    x = np.asarray(x)
    single = x.ndim == 1
    X = np.atleast_2d(x).astype(np.int64)
    z, q = static_priority_assign(X, n)
    inside = np.abs(X - n * rho).max(axis=1) <= kappa * n
    repaired = 0
    if inside.any():
        Xi = X[inside]
        s = np.clip(Xi.sum(axis=1) - n, 0, None)
        u = v((Xi - n * rho) / n**beta)
        qi = np.rint(omega_round(s[:, None] * u)).astype(np.int64)
        qi, repaired = _repair_queue(qi, Xi)
        q[inside] = qi
        z = X - q
    if single:
        z, q = z[0], q[0]
    if return_info:
        return z, q, {"repaired": repaired, "inside": int(inside.sum())}
    return z, q


def check_assignment(x, z, q, n: int) -> None:
    x, z, q = np.atleast_2d(x), np.atleast_2d(z), np.atleast_2d(q)
    bad = (
        np.any(x != z + q, axis=1)
        | np.any(z < 0, axis=1)
        | np.any(q < 0, axis=1)
        | (z.sum(axis=1) != np.minimum(x.sum(axis=1), n))
    )
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise PolicyError(
            "policy output violates X = Z + Q, Z, Q >= 0 or work conservation",
            state={"x": x[i].tolist(), "z": z[i].tolist(), "q": q[i].tolist(), "n": n},
        )


class SchedulingPolicy:
    name = "policy"

    def assign(self, x, n, rho, beta):
        """Return ``(z, q)`` for one state ``(d,)`` or a batch ``(N, d)``."""
        raise NotImplementedError

    def assign_one(self, x: tuple, n, rho, beta):
        z, q = self.assign(np.asarray(x, dtype=np.int64), n, rho, beta)
        return tuple(int(a) for a in z), tuple(int(a) for a in q)

    def describe(self) -> dict:
        return {"kind": self.name}


class StaticPriority(SchedulingPolicy):
    name = "static_priority"

    def assign(self, x, n, rho=None, beta=None):
        return static_priority_assign(x, n)

    def assign_one(self, x, n, rho=None, beta=None):
        free = n
        z = []
        for xi in x:
            zi = xi if xi < free else free
            z.append(zi)
            free -= zi
        return tuple(z), tuple(a - b for a, b in zip(x, z))


class OmegaControl(SchedulingPolicy):
    """``kappa`` defaults to ``0.9 * min(rho)``."""

    name = "omega_control"

    def __init__(self, v: MarkovControl, kappa: float | None = None):
        self.v = v
        self.kappa = kappa

    def _kappa(self, rho):
        return 0.9 * float(np.min(rho)) if self.kappa is None else self.kappa

    def assign(self, x, n, rho, beta):
        return omega_control_assign(x, n, self.v, self._kappa(rho), rho, beta)

    def describe(self):
        return {"kind": self.name, "kappa": self.kappa, "control": repr(self.v)}


class CustomPolicy(SchedulingPolicy):
    """``callback(x, n) -> (z, q)`` for a single state."""

    name = "custom"

    def __init__(self, callback):
        self.callback = callback

    def assign(self, x, n, rho=None, beta=None):
        x = np.asarray(x)
        if x.ndim == 1:
            z, q = self.callback(x, n)
            return np.asarray(z), np.asarray(q)
        out = [self.callback(row, n) for row in x]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class JointState:
    t: float
    X: tuple
    Z: tuple
    Qv: tuple
    j: int


@dataclass(frozen=True)
class JointTrajectory:
    """States at event epochs; ``X[i]`` holds on ``[times[i], times[i+1])``
    and the last row holds up to ``T``."""

    times: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Qv: np.ndarray
    J: np.ndarray
    T: float
    n: int
    beta: float
    rho: np.ndarray
    n_events: int = 0

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> JointState:
        return JointState(
            float(self.times[i]), tuple(self.X[i]), tuple(self.Z[i]), tuple(self.Qv[i]), int(self.J[i])
        )

    @property
    def durations(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.T))

    def at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.X[np.clip(idx, 0, None)]

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        cols = (
            ["t"]
            + [f"X_{i + 1}" for i in range(d)]
            + [f"Z_{i + 1}" for i in range(d)]
            + [f"Q_{i + 1}" for i in range(d)]
            + ["j"]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(len(self.times)):
                w.writerow(
                    [repr(float(self.times[i]))]
                    + self.X[i].tolist()
                    + self.Z[i].tolist()
                    + self.Qv[i].tolist()
                    + [int(self.J[i])]
                )

    def summary(self) -> dict:
        w = self.durations / self.T
        return {
            "T": self.T,
            "n": self.n,
            "events": self.n_events,
            "mean_X": (w @ self.X).tolist(),
            "mean_Q": (w @ self.Qv).tolist(),
            "final_X": self.X[-1].tolist(),
        }


@dataclass(frozen=True)
class ScaledTrajectory:
    times: np.ndarray
    Xhat: np.ndarray
    Zhat: np.ndarray
    Qhat: np.ndarray
    Xbar: np.ndarray
    Zbar: np.ndarray
    Qbar: np.ndarray
    J: np.ndarray
    T: float

    @property
    def durations(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.T))

    @property
    def Uhat(self) -> np.ndarray:
        """Queue proportions; ``e_d`` when nobody waits."""
        tot = self.Qhat.sum(axis=1, keepdims=True)
        d = self.Qhat.shape[1]
        ed = np.zeros(d)
        ed[-1] = 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            U = np.where(tot > 0, self.Qhat / np.where(tot > 0, tot, 1.0), ed)
        return U


def diffusion_scale(traj: JointTrajectory) -> ScaledTrajectory:
    n, b, rho = traj.n, traj.beta, np.asarray(traj.rho)
    s = float(n) ** -b
    return ScaledTrajectory(
        times=traj.times,
        Xhat=s * (traj.X - n * rho),
        Zhat=s * (traj.Z - n * rho),
        Qhat=s * traj.Qv,
        Xbar=traj.X / n,
        Zbar=traj.Z / n,
        Qbar=traj.Qv / n,
        J=traj.J,
        T=traj.T,
    )


def initial_state(params, xhat0) -> np.ndarray:
    """Integer headcounts closest to ``n rho + n^beta xhat0`` (clipped at 0)."""
    dq = params.derive()
    n = params.n
    x = np.rint(n * dq.rho + n**dq.beta * np.asarray(xhat0, dtype=float))
    return np.clip(x, 0, None).astype(np.int64)


# ---------------------------------------------------------------- single path


class _Uniforms:
    """Block-buffered uniforms; avoids one generator call per event."""

    def __init__(self, rng, block=8192):
        self.rng = rng
        self.block = block
        self.buf = []

    def next(self):
        if not self.buf:
            self.buf = self.rng.random(self.block).tolist()
            self.buf.reverse()
        return self.buf.pop()


def simulate(
    params,
    policy: SchedulingPolicy,
    T: float,
    x0,
    rng: np.random.Generator,
    j0: int | None = None,
    stride: int = 1,
    check: bool = True,
) -> JointTrajectory:
    """Exact sample of the joint chain on ``[0, T]``.

    Competing rates in state ``(x, z, q, k)``: arrivals ``lambda^n_i(k)``,
    service completions ``mu^n_i(k) z_i``, abandonments ``gamma^n_i(k) q_i``
    and environment jumps ``n^alpha Q[k, k']``. The policy re-assigns
    ``(z, q)`` after every event. Every ``stride``-th epoch is recorded.
    """
    if not T > 0:
        raise ValidationError(f"T must be positive, got {T}")
    dq = params.derive()
    n, beta, rho = params.n, dq.beta, dq.rho
    d, K = params.d, params.K
    x = tuple(int(a) for a in np.asarray(x0).ravel())
    if len(x) != d or min(x) < 0:
        raise ValidationError(f"x0 must be a nonnegative integer {d}-vector, got {x0}")
    if j0 is None:
        j = int(rng.choice(K, p=dq.pi))
    else:
        j = int(j0)
    lam = params.lambda_n.T.tolist()
    mu = params.mu_n.T.tolist()
    gam = params.gamma_n.T.tolist()
    Qs = params.env.scaled_Q
    env_out = (-np.diag(Qs)).tolist()
    env_cum = []
    for k in range(K):
        row = np.where(np.arange(K) == k, 0.0, Qs[k])
        tot = row.sum()
        env_cum.append(np.cumsum(row / tot).tolist() if tot > 0 else [1.0] * K)
    lam_tot = [sum(r) for r in lam]

    unif = _Uniforms(rng)
    z, q = policy.assign_one(x, n, rho, beta)
    if check:
        check_assignment(np.array(x), np.array(z), np.array(q), n)

    times, Xs, Zs, Qs_, Js = [0.0], [x], [z], [q], [j]
    t = 0.0
    n_events = 0
    from math import log

    while True:
        muk, gk, lk = mu[j], gam[j], lam[j]
        serv = [muk[i] * z[i] for i in range(d)]
        aban = [gk[i] * q[i] for i in range(d)]
        r_env = env_out[j]
        total = lam_tot[j] + sum(serv) + sum(aban) + r_env
        t -= log(1.0 - unif.next()) / total
        if t >= T:
            break
        u = unif.next() * total
        n_events += 1
        moved = False
        if u < lam_tot[j]:
            acc = 0.0
            for i in range(d):
                acc += lk[i]
                if u < acc or i == d - 1:
                    break
            x = x[:i] + (x[i] + 1,) + x[i + 1 :]
            moved = True
        else:
            u -= lam_tot[j]
            s_serv = sum(serv)
            if u < s_serv + sum(aban):
                rates = serv + aban
                acc = 0.0
                for c in range(2 * d):
                    acc += rates[c]
                    if u < acc and rates[c] > 0:
                        break
                else:
                    c = max(c_ for c_ in range(2 * d) if rates[c_] > 0)
                i = c % d
                x = x[:i] + (x[i] - 1,) + x[i + 1 :]
                moved = True
            else:
                v = unif.next()
                cum = env_cum[j]
                k2 = 0
                while k2 < K - 1 and v >= cum[k2]:
                    k2 += 1
                if k2 == j:  # guard against round-off in the cumulative row
                    k2 = max(range(K), key=lambda kk: Qs[j, kk] if kk != j else -1)
                j = k2
        if moved:
            z, q = policy.assign_one(x, n, rho, beta)
            if check:
                if min(z) < 0 or min(q) < 0 or any(a != b + c for a, b, c in zip(x, z, q)) or sum(z) != min(
                    sum(x), n
                ):
                    raise PolicyError(
                        "policy output violates state invariants during simulation",
                        state={"t": t, "x": list(x), "z": list(z), "q": list(q), "j": j, "n": n},
                    )
        if n_events % stride == 0:
            times.append(t)
            Xs.append(x)
            Zs.append(z)
            Qs_.append(q)
            Js.append(j)
    return JointTrajectory(
        times=np.array(times),
        X=np.array(Xs, dtype=np.int64).reshape(-1, d),
        Z=np.array(Zs, dtype=np.int64).reshape(-1, d),
        Qv=np.array(Qs_, dtype=np.int64).reshape(-1, d),
        J=np.array(Js, dtype=np.int64),
        T=float(T),
        n=n,
        beta=beta,
        rho=rho,
        n_events=n_events,
    )


# ---------------------------------------------------------------- ensembles


def replication_seeds(master: int, n_reps: int, offset: int = 0) -> np.ndarray:
    """Per-replication 32-bit seeds; replication ``r`` depends only on
    ``(master, r)`` so any replication can be rerun in isolation."""
    return np.array(
        [np.random.SeedSequence(int(master), spawn_key=(offset + r,)).generate_state(1)[0] for r in range(n_reps)],
        dtype=np.uint32,
    )


def _master_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63))
    if rng is None:
        raise ValidationError("a seed or Generator is required")
    return int(rng)


@dataclass
class EnsembleResult:
    """Per-replication statistics of :func:`simulate_ensemble`.

    ``snapshots[k]`` holds the ``(R, d)`` headcounts at ``snapshot_times[k]``.
    Time integrals (``int_X``, ``int_X2``, ``int_Q``, ``int_cost``,
    ``moments``) run over ``[burn_in, T]``; ``disc_cost`` is
    ``int_0^T e^{-theta s} R ds``. Costs use ``c |Qhat|^m`` with
    ``Qhat = n^-beta Q``.
    """

    n: int
    beta: float
    rho: np.ndarray
    T: float
    burn_in: float
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    int_X: np.ndarray
    int_X2: np.ndarray
    int_Q: np.ndarray
    int_cost: np.ndarray
    disc_cost: np.ndarray
    moment_orders: np.ndarray
    moments: np.ndarray
    n_events: np.ndarray
    final_X: np.ndarray
    final_J: np.ndarray
    seeds: np.ndarray
    engine: str = "kernel"
    theta: float = 0.0
    cost: object = None

    @property
    def n_reps(self) -> int:
        return len(self.seeds)

    @property
    def window(self) -> float:
        return self.T - self.burn_in

    @property
    def scaled_snapshots(self) -> np.ndarray:
        return (self.snapshots - self.n * self.rho) / self.n**self.beta

    def mean_X(self) -> np.ndarray:
        return self.int_X / self.window

    def mean_Q(self) -> np.ndarray:
        return self.int_Q / self.window

    def avg_cost(self) -> np.ndarray:
        return self.int_cost / self.window

    def avg_moments(self) -> np.ndarray:
        return self.moments / self.window


def _kernel_policy(policy, d):
    """Translate a built-in policy into kernel arguments, or ``None``."""
    from .limit_diffusion import ConstantControl, GridControl, TruncatedControl

    args = dict(
        pol_kind=0, kappa=0.0, ctrl_kind=0, ctrl_u=np.zeros(d), lo=np.zeros(d), h=np.ones(d),
        shape=np.ones(d, np.int64), strides=np.zeros(d, np.int64), vals=np.zeros((1, d)),
        trunc_R=0.0, trunc_delta=1.0,
    )
    if type(policy) is StaticPriority:
        return args
    if type(policy) is not OmegaControl:
        return None
    args["pol_kind"] = 1
    v = policy.v
    if isinstance(v, TruncatedControl):
        args["trunc_R"], args["trunc_delta"] = v.R, v.delta
        v = v.base
    if type(v) is ConstantControl:
        args["ctrl_u"] = v.u.copy()
        return args
    if type(v) is GridControl:
        if d == 1:
            args["ctrl_u"] = np.ones(1)
            return args
        shape = np.array([len(a) for a in v.axes], np.int64)
        h = np.array([(a[-1] - a[0]) / (len(a) - 1) if len(a) > 1 else 1.0 for a in v.axes])
        for a, hi in zip(v.axes, h):
            if len(a) > 1 and not np.allclose(np.diff(a), hi, rtol=1e-9, atol=0):
                return None
        strides = np.ones(d, np.int64)
        for i in range(d - 2, -1, -1):
            strides[i] = strides[i + 1] * shape[i + 1]
        args.update(
            ctrl_kind=1, lo=v.lo.copy(), h=h, shape=shape, strides=strides,
            vals=np.ascontiguousarray(v.values.reshape(-1, d)),
        )
        return args
    return None


def simulate_ensemble(
    params,
    policy: SchedulingPolicy,
    T: float,
    x0,
    rng,
    n_reps: int,
    snapshot_times=(),
    burn_in: float = 0.0,
    cost=None,
    theta: float = 0.0,
    moment_orders=(),
    j0=None,
    check: bool = True,
    rep_offset: int = 0,
    threads: int = 1,
    engine: str = "auto",
) -> EnsembleResult:
    """Simulate ``n_reps`` independent copies of the joint chain on ``[0, T]``.

    ``rng`` is a master seed (int) or a Generator from which one is drawn;
    replication ``r`` uses the stream of :func:`replication_seeds` at index
    ``rep_offset + r``, so results do not depend on ``threads``. ``cost`` is
    any object with attributes ``c``, ``m`` and ``constant`` (``None`` or a
    constant running cost). ``x0`` is ``(d,)`` or ``(R, d)``; ``j0=None``
    draws the initial environment from ``pi``.

    Built-in policies run in a compiled loop; custom policies and closure
    controls fall back to :func:`simulate` (``engine="python"`` forces it).
    """
    if not T > 0 or not 0 <= burn_in < T:
        raise ValidationError(f"need T > burn_in >= 0, got T={T}, burn_in={burn_in}")
    dq = params.derive()
    n, beta, rho = params.n, dq.beta, dq.rho
    d = params.d
    R = int(n_reps)
    X0 = np.broadcast_to(np.asarray(x0, dtype=np.int64), (R, d)).copy()
    if np.any(X0 < 0):
        raise ValidationError("x0 must be nonnegative")
    J0 = np.full(R, -1, np.int64) if j0 is None else np.broadcast_to(np.asarray(j0, np.int64), (R,)).copy()
    seeds = replication_seeds(_master_seed(rng), R, rep_offset)
    snap_t = np.asarray(sorted(snapshot_times), dtype=float)
    orders = np.asarray(moment_orders, dtype=float)
    cost_c = 0.0 if cost is None or getattr(cost, "constant", None) is not None else float(cost.c)
    cost_m = 1.0 if cost is None else float(cost.m)
    if isinstance(policy, OmegaControl):
        kappa = policy._kappa(rho)
        if not 0 < kappa < rho.min():
            raise PolicyError(f"kappa must lie in (0, min rho) = (0, {rho.min()}), got {kappa}")
    else:
        kappa = 0.0

    kargs = _kernel_policy(policy, d) if engine != "python" else None
    if kargs is not None:
        kargs["kappa"] = kappa
        out = _run_kernel(params, dq, X0, J0, seeds, T, burn_in, snap_t, kargs, cost_c, cost_m, theta, orders, check, threads)
        used = "kernel"
    else:
        out = _run_python(params, policy, X0, J0, seeds, T, burn_in, snap_t, cost_c, cost_m, theta, orders, check)
        used = "python"
    snaps, iX, iX2, iQ, ic, dc, moms, nev, fX, fJ = out
    if cost is not None and getattr(cost, "constant", None) is not None:
        r = float(cost.constant)
        ic = np.full(R, r * (T - burn_in))
        dc = np.full(R, r * (1 - np.exp(-theta * T)) / theta if theta > 0 else 0.0)
    return EnsembleResult(
        n=n, beta=beta, rho=rho, T=float(T), burn_in=float(burn_in), snapshot_times=snap_t,
        snapshots=snaps, int_X=iX, int_X2=iX2, int_Q=iQ, int_cost=ic, disc_cost=dc,
        moment_orders=orders, moments=moms, n_events=nev, final_X=fX, final_J=fJ, seeds=seeds, engine=used,
        theta=float(theta), cost=cost,
    )


def _run_kernel(params, dq, X0, J0, seeds, T, burn_in, snap_t, kargs, cost_c, cost_m, theta, orders, check, threads):
    from . import _kernels

    K = params.K
    Qs = params.env.scaled_Q
    env_out = np.ascontiguousarray(-np.diag(Qs)) if K > 1 else np.zeros(1)
    jumpP = np.where(np.eye(K, dtype=bool), 0.0, Qs)
    tot = jumpP.sum(axis=1, keepdims=True)
    jumpP = np.divide(jumpP, tot, out=np.zeros_like(jumpP), where=tot > 0)
    jump_cum = np.cumsum(jumpP, axis=1)
    for k in range(K):
        # the last reachable state closes the row exactly at 1
        pos = np.flatnonzero(jumpP[k] > 0)
        if pos.size:
            jump_cum[k, pos[-1]:] = 1.0
    pi_cum = np.cumsum(dq.pi)
    pi_cum[-1] = 1.0
    lamT = np.ascontiguousarray(params.lambda_n.T)
    muT = np.ascontiguousarray(params.mu_n.T)
    gamT = np.ascontiguousarray(params.gamma_n.T)
    n, beta, rho = params.n, dq.beta, np.ascontiguousarray(dq.rho)

    def run(sl):
        return _kernels.ensemble_kernel(
            lamT, muT, gamT, env_out, jump_cum, pi_cum,
            X0[sl], J0[sl], seeds[sl].astype(np.int64), float(T), float(burn_in), snap_t,
            n, rho, beta,
            kargs["pol_kind"], float(kargs["kappa"]), kargs["ctrl_kind"], kargs["ctrl_u"], kargs["lo"],
            kargs["h"], kargs["shape"], kargs["strides"], kargs["vals"], float(kargs["trunc_R"]),
            float(kargs["trunc_delta"]), cost_c, cost_m, float(theta), orders, bool(check),
        )

    R = len(seeds)
    threads = max(1, int(threads))
    if threads == 1 or R < 2:
        parts = [run(slice(0, R))]
    else:
        from concurrent.futures import ThreadPoolExecutor

        edges = np.linspace(0, R, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]))
    snaps = np.concatenate([p[0] for p in parts], axis=1)
    rest = [np.concatenate([p[i] for p in parts], axis=0) for i in range(1, 11)]
    err = rest[-1]
    if np.any(err):
        r = int(np.flatnonzero(err)[0])
        raise PolicyError(
            "policy output violates X = Z + Q, Z, Q >= 0 or work conservation",
            state={"replication": r, "seed": int(seeds[r]), "x": rest[7][r].tolist(), "j": int(rest[8][r]), "n": n},
        )
    return (snaps, *rest[:-1])


def _run_python(params, policy, X0, J0, seeds, T, burn_in, snap_t, cost_c, cost_m, theta, orders, check):
    R, d = X0.shape
    n = params.n
    dq = params.derive()
    nb = float(n) ** dq.beta
    out = dict(
        snaps=np.zeros((len(snap_t), R, d), np.int64), iX=np.zeros((R, d)), iX2=np.zeros((R, d)),
        iQ=np.zeros((R, d)), ic=np.zeros(R), dc=np.zeros(R), moms=np.zeros((R, len(orders))),
        nev=np.zeros(R, np.int64), fX=np.zeros((R, d), np.int64), fJ=np.zeros(R, np.int64),
    )
    for r in range(R):
        g = np.random.default_rng(int(seeds[r]))
        j0 = None if J0[r] < 0 else int(J0[r])
        tr = simulate(params, policy, T, X0[r], g, j0=j0, check=check)
        t0 = tr.times
        t1 = np.append(tr.times[1:], T)
        w = np.clip(np.minimum(t1, T) - np.maximum(t0, burn_in), 0.0, None)
        Xf = tr.X.astype(float)
        cst = cost_c * (np.linalg.norm(tr.Qv, axis=1) / nb) ** cost_m
        out["iX"][r] = w @ Xf
        out["iX2"][r] = w @ Xf**2
        out["iQ"][r] = w @ tr.Qv
        out["ic"][r] = w @ cst
        if theta > 0:
            out["dc"][r] = cst @ ((np.exp(-theta * t0) - np.exp(-theta * t1)) / theta)
        xn = np.linalg.norm((Xf - n * dq.rho) / nb, axis=1)
        for p, o in enumerate(orders):
            out["moms"][r, p] = w @ xn**o
        if len(snap_t):
            out["snaps"][:, r, :] = tr.at(snap_t)
        out["nev"][r] = tr.n_events
        out["fX"][r] = tr.X[-1]
        out["fJ"][r] = tr.J[-1]
    return tuple(out[k] for k in ("snaps", "iX", "iX2", "iQ", "ic", "dc", "moms", "nev", "fX", "fJ"))
