"""
Pure-Python reference implementations of the hot kernels.

These mirror ``_kernels.pyx`` line for line in behaviour and are used when the
compiled extension is unavailable.
"""
import math

import numpy as np


TPC, OPC, HPC = 0, 1, 2


# -- assignment ---------------------------------------------------------------

def _potentials(a):
    """Shortest-augmenting-path Hungarian method; returns row/column potentials and matching."""
    n, m = len(a), len(a[0])
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = a[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return u, v, p


def _augment(i, adj, task_owner, seen):
    for j in adj[i]:
        if not seen[j]:
            seen[j] = True
            if task_owner[j] < 0 or _augment(task_owner[j], adj, task_owner, seen):
                task_owner[j] = i
                return True
    return False


def _saturates(agents, adj, free, m):
    """True when every agent in `agents` can be matched to a distinct free task."""
    owner = [-1] * m
    for i in agents:
        seen = [not f for f in free]
        if not _augment(i, adj, owner, seen):
            return False
    return True


def _covers(required, agents, adj_t, m):
    """True when every required task can be matched to a distinct remaining agent."""
    owner = {}

    def aug(j, seen):
        for i in adj_t[j]:
            if i in agents and i not in seen:
                seen.add(i)
                if i not in owner or aug(owner[i], seen):
                    owner[i] = j
                    return True
        return False

    for j in required:
        if not aug(j, set()):
            return False
    return True


def hungarian(cost):
    """
    Lexicographically smallest minimum-cost assignment.

    Parameters
    ----------
    cost : ndarray
        ``(n, m)`` weights with ``n <= m``.

    Returns
    -------
    ndarray of int
        Task index per agent.
    """
    a = np.asarray(cost, dtype=float)
    n, m = a.shape
    u, v, _ = _potentials(a.tolist())
    eps = 1e-9 * max(1.0, float(np.abs(a).max()))
    red = a - np.asarray(u[1:])[:, None] - np.asarray(v[1:])[None, :]
    tight = np.abs(red) <= eps
    required = [j for j in range(m) if v[j + 1] < -eps]
    adj = [list(np.nonzero(tight[i])[0]) for i in range(n)]
    adj_t = [list(np.nonzero(tight[:, j])[0]) for j in range(m)]
    free = [True] * m
    assign = np.empty(n, dtype=np.int64)
    for i in range(n):
        rest = list(range(i + 1, n))
        for j in adj[i]:
            if not free[j]:
                continue
            free[j] = False
            req = [t for t in required if free[t]]
            if _saturates(rest, adj, free, m) and _covers(req, set(rest), adj_t, m):
                assign[i] = j
                break
            free[j] = True
        else:
            raise RuntimeError("no tight completion found; potentials inconsistent")
    return assign


# -- joint association and power control --------------------------------------

def puf_eval(kind, alpha, xi, xexp, target, pmax, r):
    """Vectorised power update: TPC, OPC or HPC response to effective interference `r`."""
    tpc = target * r
    opc = xi * r ** (xexp / (xexp - 1.0))
    out = np.where(kind == TPC, tpc, np.where(kind == OPC, opc, (alpha * opc + tpc) / (alpha + 1.0)))
    return np.minimum(pmax, out)


def bsa_pc_loop(gains, noise, pgain, cand, kind, alpha, xi, xexp, target, pmax, p0, tol, max_iter):
    """
    Synchronous minimum-effective-interference association plus power update.

    Parameters
    ----------
    gains : ndarray
        ``(bs, users)`` link gains.
    noise : ndarray
        Noise power per BS.
    pgain : float
        Processing gain.
    cand : ndarray of uint8
        ``(bs, users)`` candidate mask.
    kind, alpha, xi, xexp, target, pmax : ndarray
        Per-user update parameters.
    p0 : ndarray
        Initial powers.
    tol : float
        Stop when the largest power change is at most `tol`.
    max_iter : int
        Maximum number of updates.

    Returns
    -------
    p : ndarray
    assoc : ndarray of int
    n_iter : int
    converged : bool
    """
    p = np.array(p0, dtype=float)
    mask = np.asarray(cand, dtype=bool)
    assoc = np.argmax(mask, axis=0)
    for it in range(1, max_iter + 1):
        total = gains @ p + noise
        r_all = (total[:, None] - gains * p[None, :]) / (pgain * gains)
        r_all = np.where(mask, r_all, np.inf)
        assoc = np.argmin(r_all, axis=0)
        r = r_all[assoc, np.arange(p.size)]
        new = puf_eval(kind, alpha, xi, xexp, target, pmax, r)
        delta = np.max(np.abs(new - p)) if p.size else 0.0
        p = new
        if delta <= tol:
            return p, assoc, it, True
    return p, assoc, max_iter, False


# -- relaxed lower-level Lagrangian ------------------------------------------

LN2 = math.log(2.0)
LN4 = 2.0 * LN2
QCONST = math.sqrt(3.0) * math.pi / 2.0
B_SPAN = 40.0


def capacity(d, i, y, b):
    """``log2(1 + sinr)`` with ``b`` quantization bits."""
    q = QCONST * y * math.exp(-b * LN4)
    return math.log1p(d / (i + q)) / LN2


def capacity_slope(d, i, y, b):
    """Derivative of `capacity` with respect to ``b``."""
    q = QCONST * y * math.exp(-b * LN4)
    x = i + q
    return 2.0 * q * d / (x * (x + d))


def capacity_inverse(d, i, y, r):
    """Bits at which the capacity equals ``r`` (``inf`` if never reached)."""
    g = math.expm1(r * LN2)
    if g <= 0.0:
        return -math.inf
    q = d / g - i
    if q <= 0.0:
        return math.inf
    return -math.log(q / (QCONST * y)) / LN4


def _wlog(L):
    """Solve ``w + ln w = L`` for ``L > 1``."""
    w = L - math.log(L)
    for _ in range(100):
        step = w * (w + math.log(w) - L) / (w + 1.0)
        nw = w - step
        if nw <= 0.0:
            nw = 0.5 * w
        if abs(nw - w) <= 1e-15 * nw:
            return nw
        w = nw
    return w


def best_rate(lam, t, A, B, rmin, rmax):
    """Maximiser of ``r - lam * complexity`` over ``[rmin, min(t, rmax)]``."""
    hi = min(t, rmax)
    if lam <= 0.0:
        r = hi
    else:
        kappa = 0.5 * B - 0.5 / (lam * A) - 1.0 / LN2
        L = math.log(t) - kappa * LN2 if t > 0.0 else -math.inf
        if L <= 1.0:
            return rmin
        r = min(t - t / _wlog(L), hi)
    return max(rmin, r)


def complexity(r, t, A, B):
    if r <= 0.0:
        return 0.0
    gap = t - r
    if gap <= 0.0:
        return math.inf
    return A * r * (B - 2.0 * math.log(gap) / LN2)


def _bits_slope(lam, d, i, y, b, fixed_r, rv, A, B, rmin, rmax):
    t = capacity(d, i, y, b)
    tp = capacity_slope(d, i, y, b)
    if lam <= 0.0:
        return tp if t < rmax else 0.0
    r = rv if fixed_r else best_rate(lam, t, A, B, rmin, rmax)
    if r <= 0.0:
        return 0.0
    gap = t - r
    if gap <= 0.0:
        return math.inf
    return 2.0 * lam * A * r * tp / (gap * LN2)


def _log_slope(*args):
    v = _bits_slope(*args)
    return math.log(v) if v > 0.0 else -math.inf


def _bits_root(lmu, lo, hi, lam, d, i, y, fixed_r, rv, A, B, rmin, rmax, tol):
    """Largest-marginal-value bits: decreasing slope equals ``mu`` on ``[lo, hi]``."""
    fa = _log_slope(lam, d, i, y, lo, fixed_r, rv, A, B, rmin, rmax) - lmu
    if fa <= 0.0:
        return lo
    fc = _log_slope(lam, d, i, y, hi, fixed_r, rv, A, B, rmin, rmax) - lmu
    if fc >= 0.0:
        return hi
    a, c = lo, hi
    side = 0
    m = 0.5 * (a + c)
    for _ in range(200):
        if math.isinf(fa) or math.isinf(fc):
            m = 0.5 * (a + c)
        else:
            m = (a * fc - c * fa) / (fc - fa)
            if not a < m < c:
                m = 0.5 * (a + c)
        fm = _log_slope(lam, d, i, y, m, fixed_r, rv, A, B, rmin, rmax) - lmu
        if fm > 0.0:
            a, fa = m, fm
            if side == 1:
                fc *= 0.5
            side = 1
        elif fm < 0.0:
            c, fc = m, fm
            if side == -1 and not math.isinf(fa):
                fa *= 0.5
            side = -1
        else:
            return m
        if c - a <= tol * (1.0 + abs(m)):
            break
    return 0.5 * (a + c)


def _cell_bits(lmu, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, out):
    total = 0.0
    for s in idx:
        b = _bits_root(lmu, lo[s], hi[s], lam, D[s], I[s], Y[s], rfixed[s], rval[s], A, B, rmin, rmax, tol)
        out[s] = b
        total += b
    return total


def rll_lagrangian(lam, D, I, Y, cell, n_cells, floors, rfixed, rval, bfixed, bval, budgets,
                   A, B, rmin, rmax, tol):
    """
    Maximise the per-operator Lagrangian for a fixed complexity price ``lam``.

    Each cell splits its fronthaul budget by a price ``mu`` found by monotone
    root finding; each PRB takes the bits whose marginal value equals ``mu``
    and the rate that is optimal for those bits.

    Returns
    -------
    r, b : ndarray
    mu : ndarray
        Fronthaul price per cell.
    csum : float
        Total complexity per resource element.
    ok : bool
        False when some cell cannot meet its floors.
    """
    n = len(D)
    r = np.zeros(n)
    b = np.zeros(n)
    mu = np.zeros(n_cells)
    lo = np.zeros(n)
    hi = np.zeros(n)
    ok = True
    for k in range(n_cells):
        idx = []
        spare = budgets[k]
        need = 0.0
        for s in range(n):
            if cell[s] != k:
                continue
            if bfixed[s]:
                b[s] = bval[s]
                spare -= bval[s]
                continue
            rr = rval[s] if rfixed[s] else rmin
            j = floors[s]
            if rr > 0.0:
                j = max(j, capacity_inverse(D[s], I[s], Y[s], rr))
            lo[s] = j
            top = j + B_SPAN
            if lam <= 0.0 and not rfixed[s]:
                top = max(j, min(top, capacity_inverse(D[s], I[s], Y[s], rmax)))
            hi[s] = top
            need += j
            idx.append(s)
        if not idx:
            if spare < -1e-9:
                ok = False
            continue
        if need > spare + 1e-9 or math.isinf(need):
            ok = False
            for s in idx:
                b[s] = lo[s] if math.isfinite(lo[s]) else floors[s]
            continue
        top_total = sum(hi[s] for s in idx)
        if top_total <= spare:
            for s in idx:
                b[s] = hi[s]
            continue
        # bracket the price in log space, then Illinois on log(mu)
        # start from the price at which an even split of the spare bits is optimal
        logs = []
        for s in idx:
            t = min(lo[s] + (spare - need) / len(idx), hi[s])
            v = _log_slope(lam, D[s], I[s], Y[s], t, rfixed[s], rval[s], A, B, rmin, rmax)
            if math.isfinite(v):
                logs.append(v)
        x0 = sum(logs) / len(logs) if logs else 0.0
        xa, xc = x0, x0
        fa = _cell_bits(x0, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
        fc = fa
        step = 0.5
        while fa < 0.0:
            xa -= step
            step *= 2.0
            fa = _cell_bits(xa, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if xa < -700.0:
                break
        step = 0.5
        while fc > 0.0:
            xc += step
            step *= 2.0
            fc = _cell_bits(xc, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if xc > 700.0:
                break
        if fa < 0.0:
            xa = xc = -700.0
        side = 0
        for _ in range(200):
            if fc >= 0.0 or xc - xa <= 1e-13 * (1.0 + abs(xc)):
                break
            x = (xa * fc - xc * fa) / (fc - fa)
            if not xa < x < xc:
                x = 0.5 * (xa + xc)
            fx = _cell_bits(x, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if fx > 0.0:
                xa, fa = x, fx
                if side == 1:
                    fc *= 0.5
                side = 1
            else:
                xc, fc = x, fx
                if side == -1:
                    fa *= 0.5
                side = -1
                if fx > -tol * (1.0 + spare):
                    break
        mu[k] = math.exp(xc)
        _cell_bits(xc, idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b)
    csum = 0.0
    for s in range(n):
        t = capacity(D[s], I[s], Y[s], b[s])
        if rfixed[s]:
            r[s] = rval[s]
        else:
            r[s] = best_rate(lam, t, A, B, rmin, rmax)
            if t < rmin * (1.0 - 1e-12):
                ok = False
        csum += complexity(r[s], t, A, B)
    return r, b, mu, csum, ok
