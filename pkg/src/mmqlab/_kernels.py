"""Compiled event loop for ensembles of the joint queue/environment chain.

Only built-in policies are supported here: static priority (kind 0) and the
omega-mapped control (kind 1) with a constant or regular-grid control,
optionally blended to ``e_d`` outside a ball. Each replication draws from its
own MT19937 stream seeded with ``seeds[r]``.
"""
import numba
import numpy as np

ERR_NONE = 0
ERR_INVARIANT = 1


@numba.njit(cache=True, nogil=True)
def _static(x, n, z, q):
    free = n
    for i in range(x.shape[0]):
        zi = x[i] if x[i] < free else free
        if zi < 0:
            zi = 0
        z[i] = zi
        q[i] = x[i] - zi
        free -= zi


@numba.njit(cache=True, nogil=True)
def _control(xh, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta, u):
    d = xh.shape[0]
    if ctrl_kind == 0:
        for i in range(d):
            u[i] = ctrl_u[i]
    else:
        for i in range(d):
            u[i] = 0.0
        idx0 = np.empty(d, np.int64)
        w = np.empty(d)
        for i in range(d):
            if shape[i] == 1:
                idx0[i] = 0
                w[i] = 0.0
                continue
            p = (xh[i] - lo[i]) / h[i]
            top = shape[i] - 1
            if p < 0.0:
                p = 0.0
            if p > top:
                p = top
            k = int(np.floor(p))
            if k > top - 1:
                k = top - 1
            idx0[i] = k
            w[i] = p - k
        for corner in range(1 << d):
            wt = 1.0
            flat = 0
            for i in range(d):
                bit = (corner >> i) & 1
                if bit:
                    if shape[i] == 1:
                        wt = 0.0
                        break
                    wt *= w[i]
                else:
                    wt *= 1.0 - w[i]
                flat += (idx0[i] + bit) * strides[i]
            if wt == 0.0:
                continue
            for j in range(d):
                u[j] += wt * vals[flat, j]
    if trunc_R > 0.0:
        r = 0.0
        for i in range(d):
            r += xh[i] * xh[i]
        r = np.sqrt(r)
        if r > trunc_R:
            th = (r - trunc_R) / (trunc_R * trunc_delta)
            if th > 1.0:
                th = 1.0
            for i in range(d):
                u[i] *= 1.0 - th
            u[d - 1] += th
    tot = 0.0
    for i in range(d):
        if u[i] < 0.0:
            u[i] = 0.0
        tot += u[i]
    for i in range(d):
        u[i] /= tot


@numba.njit(cache=True, nogil=True)
def _omega(x, n, rho, beta, kappa, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta, z, q, xh, u):
    d = x.shape[0]
    inside = True
    for i in range(d):
        if abs(x[i] - n * rho[i]) > kappa * n:
            inside = False
            break
    if not inside:
        _static(x, n, z, q)
        return
    s = -n
    for i in range(d):
        s += x[i]
    if s < 0:
        s = 0
    scale = n**beta
    for i in range(d):
        xh[i] = (x[i] - n * rho[i]) / scale
    _control(xh, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta, u)
    acc = 0
    for i in range(d - 1):
        qi = int(np.floor(s * u[i]))
        q[i] = qi
        acc += qi
    q[d - 1] = s - acc
    # move any excess over the headcount to other classes, last class first
    deficit = 0
    for i in range(d):
        if q[i] > x[i]:
            deficit += q[i] - x[i]
            q[i] = x[i]
    i = d - 1
    while deficit > 0 and i >= 0:
        room = x[i] - q[i]
        take = room if room < deficit else deficit
        q[i] += take
        deficit -= take
        i -= 1
    for i in range(d):
        z[i] = x[i] - q[i]


@numba.njit(cache=True, nogil=True)
def ensemble_kernel(
    lamT, muT, gamT, env_out, jump_cum, pi_cum,
    X0, J0, seeds, T, burn_in, snap_times,
    n, rho, beta,
    pol_kind, kappa, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta,
    cost_c, cost_m, disc_theta, mom_orders, check,
):
    R, d = X0.shape
    K = lamT.shape[0]
    nsnap = snap_times.shape[0]
    nmom = mom_orders.shape[0]
    snaps = np.zeros((nsnap, R, d), np.int64)
    int_X = np.zeros((R, d))
    int_X2 = np.zeros((R, d))
    int_Q = np.zeros((R, d))
    int_cost = np.zeros(R)
    disc_cost = np.zeros(R)
    moms = np.zeros((R, nmom))
    n_events = np.zeros(R, np.int64)
    final_X = np.zeros((R, d), np.int64)
    final_J = np.zeros(R, np.int64)
    err = np.zeros(R, np.int64)
    x = np.empty(d, np.int64)
    z = np.empty(d, np.int64)
    q = np.empty(d, np.int64)
    xh = np.empty(d)
    u = np.empty(d)
    rates = np.empty(3 * d + 1)
    nb = n**beta
    for r in range(R):
        np.random.seed(seeds[r])
        for i in range(d):
            x[i] = X0[r, i]
        j = J0[r]
        if j < 0:
            v = np.random.random()
            j = 0
            while j < K - 1 and v >= pi_cum[j]:
                j += 1
        if pol_kind == 0:
            _static(x, n, z, q)
        else:
            _omega(x, n, rho, beta, kappa, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta, z, q, xh, u)
        t = 0.0
        si = 0
        while True:
            total = 0.0
            for i in range(d):
                rates[i] = lamT[j, i]
                rates[d + i] = muT[j, i] * z[i]
                rates[2 * d + i] = gamT[j, i] * q[i]
            rates[3 * d] = env_out[j]
            for c in range(3 * d + 1):
                total += rates[c]
            tn = t - np.log(1.0 - np.random.random()) / total
            # statistics of the state frozen on [t, tn)
            a = t if t > burn_in else burn_in
            b = tn if tn < T else T
            w = b - a
            qn2 = 0.0
            for i in range(d):
                qn2 += q[i] * q[i]
            cst = cost_c * (np.sqrt(qn2) / nb) ** cost_m
            if w > 0.0:
                xn2 = 0.0
                for i in range(d):
                    xi = float(x[i])
                    int_X[r, i] += xi * w
                    int_X2[r, i] += xi * xi * w
                    int_Q[r, i] += q[i] * w
                    dx = (xi - n * rho[i]) / nb
                    xn2 += dx * dx
                int_cost[r] += cst * w
                xn = np.sqrt(xn2)
                for p in range(nmom):
                    moms[r, p] += xn ** mom_orders[p] * w
            if disc_theta > 0.0:
                disc_cost[r] += cst * (np.exp(-disc_theta * t) - np.exp(-disc_theta * b)) / disc_theta
            while si < nsnap and snap_times[si] < tn:
                for i in range(d):
                    snaps[si, r, i] = x[i]
                si += 1
            if tn >= T:
                break
            t = tn
            n_events[r] += 1
            uu = np.random.random() * total
            c = 0
            acc = rates[0]
            while c < 3 * d and (uu >= acc or rates[c] == 0.0):
                c += 1
                acc += rates[c]
            if c < 3 * d:
                i = c % d
                if c < d:
                    x[i] += 1
                else:
                    x[i] -= 1
                if pol_kind == 0:
                    _static(x, n, z, q)
                else:
                    _omega(x, n, rho, beta, kappa, ctrl_kind, ctrl_u, lo, h, shape, strides, vals, trunc_R, trunc_delta, z, q, xh, u)
                if check:
                    sx = 0
                    sz = 0
                    bad = False
                    for i in range(d):
                        sx += x[i]
                        sz += z[i]
                        if z[i] < 0 or q[i] < 0 or x[i] != z[i] + q[i]:
                            bad = True
                    if sz != min(sx, n):
                        bad = True
                    if bad:
                        err[r] = ERR_INVARIANT
                        break
            else:
                v = np.random.random()
                k2 = 0
                while k2 < K - 1 and (v >= jump_cum[j, k2] or k2 == j):
                    k2 += 1
                j = k2
        for i in range(d):
            final_X[r, i] = x[i]
        final_J[r] = j
        if err[r]:
            break
    return snaps, int_X, int_X2, int_Q, int_cost, disc_cost, moms, n_events, final_X, final_J, err
