"""
Deterministic numerical kernels shared by the solver modules.

Spectral radius of non-negative matrices, dense linear solves, minimum-cost
assignment, the inverse Gaussian tail, projection onto the capped simplex and
a bracketing root finder.  Every routine is pure and reentrant.
"""
import math

import numpy as np

from . import kernels


PIVOT_EPS = 1e-12
POWER_ITER_MAX = 10_000


class SingularMatrixError(ArithmeticError):
    """Raised when elimination meets a pivot below the singularity threshold."""


def _as_square(m, name="m"):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def spectral_radius(m, tol=1e-10):
    """
    Spectral radius of a square non-negative matrix.

    Power iteration is run on ``c I + m`` with ``c`` the largest row sum, an
    upper bound on the root.  Its Perron root is ``rho(m) + c``, it is
    primitive whenever ``m`` is irreducible, and the shift keeps eigenvalues
    of modulus ``rho`` on other rays well separated.  The Collatz-Wielandt
    ratios bracket the root for any positive iterate, so the loop stops once the
    bracket is narrower than `tol` (relative to the root above one).  Dense
    eigenvalue moduli are used when the iteration budget runs out (slowly
    mixing or reducible inputs).

    Parameters
    ----------
    m : array_like
        Square matrix with non-negative entries.
    tol : float, optional
        Accuracy of the returned value, absolute below one and relative above.

    Returns
    -------
    float
        ``max |eig(m)|``.
    """
    m = _as_square(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if np.any(m < 0):
        raise ValueError("m must be non-negative")
    n = m.shape[0]
    if not np.any(m):
        return 0.0
    c = float(m.sum(axis=1).max())
    x = np.ones(n)
    for _ in range(POWER_ITER_MAX):
        y = c * x + m @ x
        ratios = y / x
        lo, hi = ratios.min() - c, ratios.max() - c
        if hi - lo <= tol * max(1.0, hi):
            return float(0.5 * (lo + hi))
        x = y / y.max()
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def solve_linear(a, b):
    """
    Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    Parameters
    ----------
    a : array_like
        Square coefficient matrix.
    b : array_like
        Right-hand side vector.

    Returns
    -------
    ndarray
        Solution vector.

    Raises
    ------
    SingularMatrixError
        If a pivot is smaller than ``1e-12`` times the scale of its row.
    """
    a = _as_square(a, "a").copy()
    b = np.asarray(b, dtype=float).copy()
    n = a.shape[0]
    if b.shape != (n,):
        raise ValueError(f"b must have shape ({n},), got {b.shape}")
    scale = np.abs(a).max(axis=1)
    if np.any(scale == 0):
        raise SingularMatrixError("zero row in coefficient matrix")
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[piv, k]) < PIVOT_EPS * scale[piv]:
            raise SingularMatrixError(f"pivot {a[piv, k]:.3e} below threshold at column {k}")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
            b[[k, piv]] = b[[piv, k]]
            scale[[k, piv]] = scale[[piv, k]]
        f = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(f, a[k, k:])
        b[k + 1:] -= f * b[k]
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x


def hungarian_min_assign(cost):
    """
    Minimum-cost assignment of agents (rows) to distinct tasks (columns).

    Among all optimal assignments the lexicographically smallest task vector
    is returned, so results are reproducible when weights tie.

    Parameters
    ----------
    cost : array_like
        ``(agents, tasks)`` table of finite non-negative weights, agents <= tasks.

    Returns
    -------
    assign : ndarray of int
        ``assign[i]`` is the task given to agent ``i``.
    total : float
        Total cost of the assignment.
    """
    cost = np.ascontiguousarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more agents ({n}) than tasks ({m})")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("weights must be finite and non-negative")
    assign = np.asarray(kernels.hungarian(cost), dtype=np.int64)
    return assign, float(cost[np.arange(n), assign].sum())


def q_function(x):
    """Gaussian tail probability ``Q(x) = P[N(0,1) > x]``."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def inverse_q(p):
    """
    Inverse of the Gaussian tail function on ``(0, 0.5)``.

    Bisection on ``erfc`` followed by Newton polishing.

    Parameters
    ----------
    p : float
        Tail probability, ``0 < p < 0.5``.

    Returns
    -------
    float
        ``x >= 0`` with ``Q(x) = p``.
    """
    if not 0.0 < p < 0.5:
        raise ValueError(f"p must lie in (0, 0.5), got {p}")
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q_function(mid) > p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    x = 0.5 * (lo + hi)
    for _ in range(3):
        dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if dens == 0.0:
            break
        x += (q_function(x) - p) / dens
    return x


def project_capped_simplex(x, cap):
    """
    Euclidean projection onto ``{y : y >= 0, sum(y) <= cap}``.

    Parameters
    ----------
    x : array_like
        Point to project.
    cap : float
        Non-negative budget.

    Returns
    -------
    ndarray
    """
    if cap < 0:
        raise ValueError("cap must be non-negative")
    x = np.asarray(x, dtype=float)
    y = np.maximum(x, 0.0)
    if y.sum() <= cap:
        return y
    # budget binds: find the shift theta with sum(max(x - theta, 0)) = cap
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - cap
    idx = np.arange(1, x.size + 1)
    keep = u - css / idx > 0
    keep[0] = True  # holds exactly for cap > 0, may round away for tiny caps
    rho = np.nonzero(keep)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(x - theta, 0.0)


def bisect_root(f, lo, hi, tol=1e-12, max_iter=500):
    """
    Root of a monotone function on a sign-changing bracket.

    Parameters
    ----------
    f : callable
        Monotone scalar function.
    lo, hi : float
        Bracket with ``f(lo) * f(hi) <= 0``.
    tol : float, optional
        Stop when ``|f(x)| <= tol`` or the bracket is narrower than `tol`.

    Returns
    -------
    float
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if flo * fhi > 0:
        raise ValueError("no sign change on the bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= tol or hi - lo <= tol:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)
