# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""
Compiled hot kernels: assignment, joint association/power iteration and the
per-PRB closed-form steps of the relaxed lower-level solver.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow, INFINITY

cnp.import_array()

DEF TPC = 0
DEF OPC = 1
DEF HPC = 2


# -- assignment ---------------------------------------------------------------

cdef void _potentials(const double[:, ::1] a, double[::1] u, double[::1] v, long[::1] p):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    cdef double[::1] minv = np.empty(m + 1)
    cdef long[::1] way = np.zeros(m + 1, dtype=np.int64)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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


cdef bint _aug_agent(Py_ssize_t i, unsigned char[:, ::1] tight, unsigned char[::1] avail,
                     long[::1] owner, unsigned char[::1] seen):
    cdef Py_ssize_t j, m = tight.shape[1]
    for j in range(m):
        if tight[i, j] and avail[j] and not seen[j]:
            seen[j] = 1
            if owner[j] < 0 or _aug_agent(owner[j], tight, avail, owner, seen):
                owner[j] = i
                return True
    return False


cdef bint _aug_task(Py_ssize_t j, unsigned char[:, ::1] tight, Py_ssize_t first,
                    long[::1] owner, unsigned char[::1] seen):
    cdef Py_ssize_t i, n = tight.shape[0]
    for i in range(first, n):
        if tight[i, j] and not seen[i]:
            seen[i] = 1
            if owner[i] < 0 or _aug_task(owner[i], tight, first, owner, seen):
                owner[i] = j
                return True
    return False


cdef bint _completes(Py_ssize_t first, unsigned char[:, ::1] tight, unsigned char[::1] avail,
                     unsigned char[::1] required):
    cdef Py_ssize_t n = tight.shape[0], m = tight.shape[1], i, j, k
    cdef long[::1] owner = np.full(max(n, m), -1, dtype=np.int64)
    cdef unsigned char[::1] seen = np.zeros(max(n, m), dtype=np.uint8)
    for i in range(first, n):
        for k in range(m):
            seen[k] = 0
        if not _aug_agent(i, tight, avail, owner, seen):
            return False
    for k in range(max(n, m)):
        owner[k] = -1
    for j in range(m):
        if required[j] and avail[j]:
            for k in range(n):
                seen[k] = 0
            if not _aug_task(j, tight, first, owner, seen):
                return False
    return True


def hungarian(const double[:, ::1] a):
    """Lexicographically smallest minimum-cost assignment (rows to columns)."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], i, j
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef long[::1] p = np.zeros(m + 1, dtype=np.int64)
    _potentials(a, u, v, p)
    cdef double amax = 1.0
    for i in range(n):
        for j in range(m):
            if fabs(a[i, j]) > amax:
                amax = fabs(a[i, j])
    cdef double eps = 1e-9 * amax
    cdef unsigned char[:, ::1] tight = np.zeros((n, m), dtype=np.uint8)
    cdef unsigned char[::1] required = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] avail = np.ones(m, dtype=np.uint8)
    for i in range(n):
        for j in range(m):
            tight[i, j] = fabs(a[i, j] - u[i + 1] - v[j + 1]) <= eps
    for j in range(m):
        required[j] = v[j + 1] < -eps
    out = np.empty(n, dtype=np.int64)
    cdef long[::1] assign = out
    cdef bint found
    for i in range(n):
        found = False
        for j in range(m):
            if tight[i, j] and avail[j]:
                avail[j] = 0
                if _completes(i + 1, tight, avail, required):
                    assign[i] = j
                    found = True
                    break
                avail[j] = 1
        if not found:
            raise RuntimeError("no tight completion found; potentials inconsistent")
    return out


# -- joint association and power control --------------------------------------

cdef inline double _puf(int kind, double alpha, double xi, double xexp, double target,
                        double pmax, double r):
    cdef double tpc = target * r
    cdef double opc, out
    if kind == TPC:
        out = tpc
    else:
        opc = xi * pow(r, xexp / (xexp - 1.0))
        if kind == OPC:
            out = opc
        else:
            out = (alpha * opc + tpc) / (alpha + 1.0)
    return pmax if out > pmax else out


def bsa_pc_loop(const double[:, ::1] gains, const double[::1] noise, double pgain,
                const unsigned char[:, ::1] cand, const long[::1] kind, const double[::1] alpha,
                const double[::1] xi, const double[::1] xexp, const double[::1] target,
                const double[::1] pmax, const double[::1] p0, double tol, long max_iter):
    """Synchronous minimum-effective-interference association plus power update."""
    cdef Py_ssize_t nb = gains.shape[0], nu = gains.shape[1], b, i, j
    cdef long it
    p_arr = np.array(p0, dtype=float)
    new_arr = np.empty(nu)
    assoc_arr = np.zeros(nu, dtype=np.int64)
    cdef double[::1] p = p_arr
    cdef double[::1] new = new_arr
    cdef long[::1] assoc = assoc_arr
    cdef double[::1] total = np.empty(nb)
    cdef double best, r, delta, d
    for i in range(nu):
        for b in range(nb):
            if cand[b, i]:
                assoc[i] = b
                break
    for it in range(1, max_iter + 1):
        for b in range(nb):
            total[b] = noise[b]
            for j in range(nu):
                total[b] += gains[b, j] * p[j]
        delta = 0.0
        for i in range(nu):
            best = INFINITY
            for b in range(nb):
                if cand[b, i]:
                    r = (total[b] - gains[b, i] * p[i]) / (pgain * gains[b, i])
                    if r < best:
                        best = r
                        assoc[i] = b
            new[i] = _puf(kind[i], alpha[i], xi[i], xexp[i], target[i], pmax[i], best)
            d = fabs(new[i] - p[i])
            if d > delta:
                delta = d
        for i in range(nu):
            p[i] = new[i]
        if delta <= tol:
            return p_arr, assoc_arr, it, True
    return p_arr, assoc_arr, max_iter, False


# -- relaxed lower-level Lagrangian ------------------------------------------

from libc.math cimport exp, log, log1p, expm1, sqrt, isinf, isfinite, M_PI

cdef double LN2 = log(2.0)
cdef double LN4 = 2.0 * log(2.0)
cdef double QCONST = sqrt(3.0) * M_PI / 2.0
cdef double B_SPAN = 40.0


cdef inline double _capacity(double d, double i, double y, double b) nogil:
    cdef double q = QCONST * y * exp(-b * LN4)
    return log1p(d / (i + q)) / LN2


cdef inline double _capacity_slope(double d, double i, double y, double b) nogil:
    cdef double q = QCONST * y * exp(-b * LN4)
    cdef double x = i + q
    return 2.0 * q * d / (x * (x + d))


cdef inline double _capacity_inverse(double d, double i, double y, double r) nogil:
    cdef double g = expm1(r * LN2)
    cdef double q
    if g <= 0.0:
        return -INFINITY
    q = d / g - i
    if q <= 0.0:
        return INFINITY
    return -log(q / (QCONST * y)) / LN4


cdef inline double _wlog(double L) nogil:
    cdef double w = L - log(L), nw, step
    cdef int k
    for k in range(100):
        step = w * (w + log(w) - L) / (w + 1.0)
        nw = w - step
        if nw <= 0.0:
            nw = 0.5 * w
        if fabs(nw - w) <= 1e-15 * nw:
            return nw
        w = nw
    return w


cdef inline double _best_rate(double lam, double t, double A, double B, double rmin,
                              double rmax) nogil:
    cdef double hi = t if t < rmax else rmax
    cdef double r, kappa, L
    if lam <= 0.0:
        r = hi
    else:
        kappa = 0.5 * B - 0.5 / (lam * A) - 1.0 / LN2
        if t > 0.0:
            L = log(t) - kappa * LN2
        else:
            L = -INFINITY
        if L <= 1.0:
            return rmin
        r = t - t / _wlog(L)
        if r > hi:
            r = hi
    return rmin if r < rmin else r


cdef inline double _complexity(double r, double t, double A, double B) nogil:
    cdef double gap
    if r <= 0.0:
        return 0.0
    gap = t - r
    if gap <= 0.0:
        return INFINITY
    return A * r * (B - 2.0 * log(gap) / LN2)


cdef inline double _bits_slope(double lam, double d, double i, double y, double b, bint fixed_r,
                               double rv, double A, double B, double rmin, double rmax) nogil:
    cdef double t = _capacity(d, i, y, b)
    cdef double tp = _capacity_slope(d, i, y, b)
    cdef double r, gap
    if lam <= 0.0:
        return tp if t < rmax else 0.0
    r = rv if fixed_r else _best_rate(lam, t, A, B, rmin, rmax)
    if r <= 0.0:
        return 0.0
    gap = t - r
    if gap <= 0.0:
        return INFINITY
    return 2.0 * lam * A * r * tp / (gap * LN2)


cdef inline double _log_slope(double lam, double d, double i, double y, double b, bint fixed_r,
                               double rv, double A, double B, double rmin, double rmax) nogil:
    cdef double v = _bits_slope(lam, d, i, y, b, fixed_r, rv, A, B, rmin, rmax)
    if v <= 0.0:
        return -INFINITY
    return log(v)


cdef double _bits_root(double lmu, double lo, double hi, double lam, double d, double i, double y,
                       bint fixed_r, double rv, double A, double B, double rmin, double rmax,
                       double tol) nogil:
    cdef double fa = _log_slope(lam, d, i, y, lo, fixed_r, rv, A, B, rmin, rmax) - lmu
    cdef double fc, fm, a, c, m
    cdef int side = 0, k
    if fa <= 0.0:
        return lo
    fc = _log_slope(lam, d, i, y, hi, fixed_r, rv, A, B, rmin, rmax) - lmu
    if fc >= 0.0:
        return hi
    a = lo
    c = hi
    for k in range(200):
        if isinf(fa) or isinf(fc):
            m = 0.5 * (a + c)
        else:
            m = (a * fc - c * fa) / (fc - fa)
            if not (a < m < c):
                m = 0.5 * (a + c)
        fm = _log_slope(lam, d, i, y, m, fixed_r, rv, A, B, rmin, rmax) - lmu
        if fm > 0.0:
            a = m
            fa = fm
            if side == 1:
                fc *= 0.5
            side = 1
        elif fm < 0.0:
            c = m
            fc = fm
            if side == -1 and not isinf(fa):
                fa *= 0.5
            side = -1
        else:
            return m
        if c - a <= tol * (1.0 + fabs(m)):
            break
    return 0.5 * (a + c)


cdef double _cell_bits(double lmu, long[::1] idx, Py_ssize_t n_idx, double[::1] lo, double[::1] hi,
                       double lam, const double[::1] D, const double[::1] I, const double[::1] Y,
                       const unsigned char[::1] rfixed, const double[::1] rval, double A, double B,
                       double rmin, double rmax, double tol, double[::1] out) nogil:
    cdef double total = 0.0
    cdef Py_ssize_t k, s
    for k in range(n_idx):
        s = idx[k]
        out[s] = _bits_root(lmu, lo[s], hi[s], lam, D[s], I[s], Y[s], rfixed[s], rval[s],
                            A, B, rmin, rmax, tol)
        total += out[s]
    return total


def capacity(double d, double i, double y, double b):
    return _capacity(d, i, y, b)


def capacity_slope(double d, double i, double y, double b):
    return _capacity_slope(d, i, y, b)


def capacity_inverse(double d, double i, double y, double r):
    return _capacity_inverse(d, i, y, r)


def best_rate(double lam, double t, double A, double B, double rmin, double rmax):
    return _best_rate(lam, t, A, B, rmin, rmax)


def complexity(double r, double t, double A, double B):
    return _complexity(r, t, A, B)


def rll_lagrangian(double lam, const double[::1] D, const double[::1] I, const double[::1] Y,
                   const long[::1] cell, long n_cells, const double[::1] floors,
                   const unsigned char[::1] rfixed, const double[::1] rval,
                   const unsigned char[::1] bfixed, const double[::1] bval,
                   const double[::1] budgets, double A, double B, double rmin, double rmax,
                   double tol):
    """Per-operator Lagrangian maximiser for a fixed complexity price."""
    cdef Py_ssize_t n = D.shape[0], s, k, n_idx, it
    r_arr = np.zeros(n)
    b_arr = np.zeros(n)
    mu_arr = np.zeros(n_cells)
    cdef double[::1] r = r_arr
    cdef double[::1] b = b_arr
    cdef double[::1] mu = mu_arr
    cdef double[::1] lo = np.zeros(n)
    cdef double[::1] hi = np.zeros(n)
    cdef long[::1] idx = np.zeros(n, dtype=np.int64)
    cdef bint ok = True
    cdef double spare, need, rr, j, top, top_total, xa, xc, fa, fc, x, fx, t, csum
    cdef double step, x0
    cdef int n_fin
    cdef int side
    for k in range(n_cells):
        n_idx = 0
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
                t = _capacity_inverse(D[s], I[s], Y[s], rr)
                if t > j:
                    j = t
            lo[s] = j
            top = j + B_SPAN
            if lam <= 0.0 and not rfixed[s]:
                t = _capacity_inverse(D[s], I[s], Y[s], rmax)
                if t < top:
                    top = t
                if top < j:
                    top = j
            hi[s] = top
            need += j
            idx[n_idx] = s
            n_idx += 1
        if n_idx == 0:
            if spare < -1e-9:
                ok = False
            continue
        if need > spare + 1e-9 or isinf(need):
            ok = False
            for it in range(n_idx):
                s = idx[it]
                b[s] = lo[s] if isfinite(lo[s]) else floors[s]
            continue
        top_total = 0.0
        for it in range(n_idx):
            top_total += hi[idx[it]]
        if top_total <= spare:
            for it in range(n_idx):
                b[idx[it]] = hi[idx[it]]
            continue
        # start from the price at which an even split of the spare bits is optimal
        x0 = 0.0
        n_fin = 0
        for it in range(n_idx):
            s = idx[it]
            t = lo[s] + (spare - need) / n_idx
            if t > hi[s]:
                t = hi[s]
            fx = _log_slope(lam, D[s], I[s], Y[s], t, rfixed[s], rval[s], A, B, rmin, rmax)
            if isfinite(fx):
                x0 += fx
                n_fin += 1
        if n_fin > 0:
            x0 /= n_fin
        xa = x0
        xc = x0
        fa = _cell_bits(x0, idx, n_idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
        fc = fa
        step = 0.5
        while fa < 0.0:
            xa -= step
            step *= 2.0
            fa = _cell_bits(xa, idx, n_idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if xa < -700.0:
                break
        step = 0.5
        while fc > 0.0:
            xc += step
            step *= 2.0
            fc = _cell_bits(xc, idx, n_idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if xc > 700.0:
                break
        if fa < 0.0:
            xa = -700.0
            xc = -700.0
        side = 0
        for it in range(200):
            if fc >= 0.0 or xc - xa <= 1e-13 * (1.0 + fabs(xc)):
                break
            x = (xa * fc - xc * fa) / (fc - fa)
            if not (xa < x < xc):
                x = 0.5 * (xa + xc)
            fx = _cell_bits(x, idx, n_idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b) - spare
            if fx > 0.0:
                xa = x
                fa = fx
                if side == 1:
                    fc *= 0.5
                side = 1
            else:
                xc = x
                fc = fx
                if side == -1:
                    fa *= 0.5
                side = -1
                if fx > -tol * (1.0 + spare):
                    break
        mu[k] = exp(xc)
        _cell_bits(xc, idx, n_idx, lo, hi, lam, D, I, Y, rfixed, rval, A, B, rmin, rmax, tol, b)
    csum = 0.0
    for s in range(n):
        t = _capacity(D[s], I[s], Y[s], b[s])
        if rfixed[s]:
            r[s] = rval[s]
        else:
            r[s] = _best_rate(lam, t, A, B, rmin, rmax)
            if t < rmin * (1.0 - 1e-12):
                ok = False
        csum += _complexity(r[s], t, A, B)
    return r_arr, b_arr, mu_arr, csum, bool(ok)
