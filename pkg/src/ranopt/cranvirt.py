"""
Uplink C-RAN virtualization: joint rate and quantization-bit allocation for
several operators sharing cloud computation and fronthaul capacity.

The infrastructure provider splits the cloud computation budget and each
cell's fronthaul capacity among operators (upper level).  Each operator then
picks a rate and a number of quantization bits for every PRB it owns
(lower level).  Both levels are solved on a continuous relaxation, after
which the rates are snapped to a discrete MCS rate set and bits to integers.

Units: complexity in bit-iterations per second (bips), fronthaul in bits per
second, rates in bits per channel use, prices in cents per unit.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .linalg import project_capped_simplex
from .scenario import Scenario, ScenarioConfig, generate_topology, substream

LN2 = math.log(2.0)
QCONST = math.sqrt(3.0) * math.pi / 2.0

# transport block sizes (bits) of the 27 LTE MCS indices for one PRB
LTE_TBS_ONE_PRB = (16, 24, 32, 40, 56, 72, 88, 104, 120, 136, 144, 176, 208, 224, 256,
                   280, 328, 336, 376, 408, 440, 488, 520, 552, 584, 616, 712)
RE_PER_SECOND = 12 * 7 / 0.5e-3
LAM_FLOOR = 1e-9
SLICE_MARGIN_BITS = 0.01


class InfeasibleSlice(ValueError):
    """Resource slice too small for the per-PRB floors."""


def lte_rate_set(n_re=RE_PER_SECOND):
    """Rates (bits per channel use) of the LTE MCS table for one PRB."""
    return np.array(LTE_TBS_ONE_PRB, dtype=float) * 1e3 / n_re


# -- quantization, SINR and complexity ----------------------------------------

def quant_noise(b, Y):
    """Quantization noise power ``sqrt(3) pi Y / 2^(2b+1)``."""
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or np.any(np.asarray(Y) <= 0):
        raise ValueError("need b >= 0 and Y > 0")
    return QCONST * np.asarray(Y, dtype=float) * np.exp2(-2.0 * b)


def sinr_with_quant(D, I, b):
    """SINR with quantization noise; tends to ``D/I`` as ``b`` grows."""
    D = np.asarray(D, dtype=float)
    I = np.asarray(I, dtype=float)
    return D / (I + quant_noise(b, D + I))


def sinr_lower_bound(gbar):
    """SINR guaranteed once the quantization noise is at most ``sqrt(Y I)``."""
    return np.sqrt(np.asarray(gbar, dtype=float) + 1.0) - 1.0


def min_quant_bits(D, I, exact=False):
    """
    Fewest bits keeping the quantization noise below ``sqrt(Y I)``.

    Parameters
    ----------
    D, I : array_like
        Direct and interference-plus-noise powers.
    exact : bool
        Return the real-valued threshold instead of its ceiling.
    """
    D = np.asarray(D, dtype=float)
    I = np.asarray(I, dtype=float)
    bmin = 0.5 * (np.log2(2.0 * QCONST * np.sqrt((D + I) / I)) - 1.0)
    if exact:
        return bmin
    return np.ceil(bmin - 1e-12)


def capacity(D, I, b):
    """``log2(1 + sinr)`` for ``b`` quantization bits."""
    return np.log2(1.0 + sinr_with_quant(D, I, b))


@dataclass(frozen=True)
class ComplexityModel:
    """
    Decoding effort per channel use ``A r (B - 2 log2(t - r))``.

    ``t_prime`` scales the channel-dependent term, ``zeta`` is the check-node
    degree of the code and ``eps`` the target channel error probability.
    """
    t_prime: float = 0.2
    zeta: float = 6.0
    eps: float = 0.1

    def __post_init__(self):
        if not self.zeta > 2:
            raise ValueError("zeta must exceed 2")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def A(self):
        return 1.0 / math.log2(self.zeta - 1.0)

    @property
    def B(self):
        T = -self.t_prime / math.log10(self.eps)
        return math.log2((self.zeta - 2.0) / (self.zeta * T))

    def per_use(self, r, t):
        """Complexity for rate ``r`` on a link of capacity ``t`` (inf if ``r >= t``)."""
        r = np.asarray(r, dtype=float)
        t = np.asarray(t, dtype=float)
        gap = t - r
        with np.errstate(divide="ignore", invalid="ignore"):
            c = self.A * r * (self.B - 2.0 * np.log2(np.where(gap > 0, gap, 1.0)))
        c = np.where(gap > 0, c, np.inf)
        return np.where(r <= 0, 0.0, c)


def decode_complexity(model, r, b, D, I):
    """
    Bit-iterations per channel use to decode rate ``r`` with ``b`` bits.

    Raises
    ------
    ValueError
        If ``r`` is not strictly below the link capacity.
    """
    t = capacity(D, I, b)
    if np.any(np.asarray(r) >= t):
        raise ValueError("rate must stay below capacity")
    return model.per_use(r, t)


# -- scenario -----------------------------------------------------------------

def prb_counts(n_prbs, n_ops, weights=None):
    """Split ``n_prbs`` among operators in proportion to ``weights`` (default 1:2:...:O)."""
    w = np.arange(1, n_ops + 1, dtype=float) if weights is None else np.asarray(weights, dtype=float)
    raw = n_prbs * w / w.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n_prbs - counts.sum()]:
        counts[i] += 1
    return counts


@dataclass
class CranScenario:
    """
    Per-PRB powers and the operator partition of a C-RAN instance.

    Attributes
    ----------
    D : ndarray
        ``(K, S)`` received power of the scheduled user.
    I : ndarray
        ``(K, S)`` interference plus noise.
    owner : ndarray
        ``(K, S)`` operator index of each PRB.
    n_ops : int
    n_re : float
        Resource elements per second in one PRB.
    rates : ndarray
        Ascending discrete rate set.
    """
    D: np.ndarray
    I: np.ndarray
    owner: np.ndarray
    n_ops: int
    n_re: float = RE_PER_SECOND
    rates: np.ndarray = field(default_factory=lte_rate_set)

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        self.I = np.asarray(self.I, dtype=float)
        self.owner = np.asarray(self.owner, dtype=int)
        self.rates = np.asarray(self.rates, dtype=float)
        if self.D.shape != self.I.shape or self.D.shape != self.owner.shape or self.D.ndim != 2:
            raise ValueError("D, I and owner must share a (K, S) shape")
        if not (np.all(self.D > 0) and np.all(self.I > 0)):
            raise ValueError("powers must be positive")
        if self.owner.min() < 0 or self.owner.max() >= self.n_ops:
            raise ValueError("owner index out of range")
        if self.rates.size == 0 or np.any(np.diff(self.rates) <= 0) or self.rates[0] <= 0:
            raise ValueError("rates must be positive and strictly ascending")

    @property
    def Y(self):
        return self.D + self.I

    @property
    def n_cells(self):
        return self.D.shape[0]

    @property
    def n_prbs(self):
        return self.D.shape[1]

    @property
    def rmin(self):
        return float(self.rates[0])

    @property
    def rmax(self):
        return float(self.rates[-1])

    def prbs_of(self, op):
        """``(cells, prbs)`` index arrays of the PRBs owned by ``op``, cell-major."""
        return np.nonzero(self.owner == op)

    def shannon_rates(self):
        return np.log2(1.0 + self.D / self.I)


def cran_scenario(source, n_ops=3, weights=None, counts=None, seed=None, rates=None, n_re=RE_PER_SECOND):
    """
    Build a CranScenario from a hexagonal-grid Scenario or its config.

    Each cell assigns its PRBs to operators at random, with ``counts`` PRBs
    per operator (default proportional to 1:2:...:O).
    """
    if isinstance(source, (ScenarioConfig, dict)):
        source = generate_topology(source)
    if not isinstance(source, Scenario) or source.gains.ndim != 3:
        raise ValueError("need a hexgrid scenario with per-PRB gains")
    g = source.gains
    p = source.max_powers
    K, _, S = g.shape
    rx = g * p[None, :, None]
    D = rx[np.arange(K), np.arange(K)]
    I = rx.sum(axis=1) - D + source.noise[:, None]
    counts = prb_counts(S, n_ops, weights) if counts is None else np.asarray(counts, dtype=int)
    if counts.sum() != S or np.any(counts < 0):
        raise ValueError("PRB counts must sum to the PRBs per cell")
    labels = np.repeat(np.arange(n_ops), counts)
    rng = substream(source.rng_seed if seed is None else seed, "partition")
    owner = np.stack([labels[rng.permutation(S)] for _ in range(K)])
    return CranScenario(D, I, owner, n_ops, n_re, lte_rate_set(n_re) if rates is None else rates)


# -- economics ----------------------------------------------------------------

@dataclass
class EconomicModel:
    """
    Prices and profit weights.

    ``psi`` is charged per bips of computation, ``beta`` per bps of fronthaul
    (per operator, optionally per cell) and ``rho`` is each operator's revenue
    per bps.  Defaults are 1 cent/Mbips, 1 cent/Mbps and 5 cents/Mbps.
    """
    n_ops: int = 3
    psi: object = 1e-6
    beta: object = 1e-6
    rho: object = 5e-6
    ups_inp: float = 1.0
    ups: object = 1.0

    def __post_init__(self):
        self.psi = np.broadcast_to(np.asarray(self.psi, dtype=float), (self.n_ops,)).copy()
        self.rho = np.broadcast_to(np.asarray(self.rho, dtype=float), (self.n_ops,)).copy()
        self.ups = np.broadcast_to(np.asarray(self.ups, dtype=float), (self.n_ops,)).copy()
        beta = np.asarray(self.beta, dtype=float)
        self.beta = beta.reshape(-1, 1) if beta.ndim == 1 else beta
        if np.any(self.psi < 0) or np.any(self.beta < 0) or np.any(self.rho < 0):
            raise ValueError("prices must be non-negative")

    def beta_for(self, n_cells):
        return np.broadcast_to(self.beta, (self.n_ops, n_cells))


def profits(econ, c_slices, b_slices, rates, n_re=RE_PER_SECOND):
    """
    Payments and profits of the provider and operators.

    Parameters
    ----------
    econ : EconomicModel
    c_slices : array_like
        ``(O,)`` computation slices (bips).
    b_slices : array_like
        ``(O, K)`` fronthaul slices (bps).
    rates : array_like
        ``(O,)`` operator sum rates (bits per channel use).

    Returns
    -------
    g_inp : ndarray
        Payment from each operator to the provider.
    g_op : ndarray
        Profit of each operator.
    objective : float
        Weighted sum profit.
    """
    c = np.asarray(c_slices, dtype=float)
    b = np.asarray(b_slices, dtype=float)
    g_inp = econ.psi * c + (econ.beta_for(b.shape[1]) * b).sum(axis=1)
    g_op = econ.rho * n_re * np.asarray(rates, dtype=float) - g_inp
    return g_inp, g_op, float(econ.ups_inp * g_inp.sum() + (econ.ups * g_op).sum())


def satisfaction_index(achieved, maximum):
    """Achieved over maximum potential profit, clipped to ``[0, 1]``."""
    if maximum <= 0:
        return 0.0
    return float(min(max(achieved / maximum, 0.0), 1.0))


# -- lower level: rate given bits, bits given rates ---------------------------

def _rate_slope(lam, r, t, model):
    """Derivative in ``r`` of ``r - lam * complexity`` at fixed capacity ``t``."""
    A, B = model.A, model.B
    E = 1.0 - lam * A * B + 2.0 * lam * A * np.log2(t)
    return E + 2.0 * lam * A * (np.log2(1.0 - r / t) - r / ((t - r) * LN2))


def optimal_rate_given_bits(lam, t, model, rmin, rmax, tol=1e-13):
    """
    Rate maximising ``r - lam * complexity`` on one PRB with capacity ``t``.

    The objective is concave in ``r``, so the stationary point is located by
    bisection on its derivative and clipped to ``[rmin, min(t, rmax)]``.
    When the derivative has no sign change the better endpoint is returned.
    """
    hi = min(t, rmax)
    if lam <= 0:
        return max(rmin, hi)
    if hi <= rmin:
        return rmin
    if _rate_slope(lam, rmin, t, model) <= 0:
        return rmin
    top = hi if hi < t else t * (1.0 - 1e-15)
    if _rate_slope(lam, top, t, model) >= 0:
        return hi
    a, c = rmin, top
    while c - a > tol * max(1.0, c):
        m = 0.5 * (a + c)
        if _rate_slope(lam, m, t, model) > 0:
            a = m
        else:
            c = m
    return 0.5 * (a + c)


def _bits_slope(lam, r, b, D, I, model):
    """Marginal value of one more bit: ``2 lam A r t'(b) / ((t - r) ln 2)``."""
    Y = D + I
    q = QCONST * Y * np.exp2(-2.0 * b)
    x = I + q
    tp = 2.0 * q * D / (x * (x + D))
    t = np.log2(1.0 + D / x)
    gap = t - r
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 * lam * model.A * r * tp / (gap * LN2)
    return np.where(gap > 0, out, np.inf)


def bits_for_capacity(D, I, r):
    """Bits at which the capacity equals ``r`` (``inf`` when unreachable)."""
    D, I, r = np.broadcast_arrays(np.asarray(D, float), np.asarray(I, float), np.asarray(r, float))
    g = np.exp2(r) - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        q = D / g - I
        b = -np.log2(q / (QCONST * (D + I))) / 2.0
    return np.where(g <= 0, -np.inf, np.where(q <= 0, np.inf, b))


def optimal_bits_given_rates(lam, r, budget, floors, D, I, model, span=40.0, tol=1e-12):
    """
    Water-fill one cell's bit budget for fixed rates.

    Every PRB receives the bits at which its marginal value equals a common
    price ``mu``, never fewer than its floor or the bits needed to carry
    ``r``; ``mu`` is set by bisection so the whole budget is spent.

    Parameters
    ----------
    lam : float
        Complexity price, positive.
    r, floors, D, I : ndarray
        Per-PRB rates, bit floors and powers.
    budget : float
        Bits per resource element available to the cell.

    Returns
    -------
    ndarray
        Bits per PRB.

    Raises
    ------
    InfeasibleSlice
        If the floors alone exceed the budget.
    """
    r, floors, D, I = (np.asarray(v, dtype=float) for v in (r, floors, D, I))
    lo = np.maximum(floors, bits_for_capacity(D, I, r))
    if not np.all(np.isfinite(lo)) or lo.sum() > budget + 1e-9:
        raise InfeasibleSlice("fronthaul budget below the bit floors")
    hi = lo + span
    if hi.sum() <= budget:
        return hi

    def bits_at(mu):
        a, c = lo.copy(), hi.copy()
        for _ in range(200):
            m = 0.5 * (a + c)
            up = _bits_slope(lam, r, m, D, I, model) > mu
            a = np.where(up, m, a)
            c = np.where(up, c, m)
            if np.all(c - a <= tol * (1.0 + m)):
                break
        return 0.5 * (a + c)

    x_lo, x_hi = -700.0, 700.0
    for _ in range(300):
        x = 0.5 * (x_lo + x_hi)
        if bits_at(math.exp(x)).sum() > budget:
            x_lo = x
        else:
            x_hi = x
        if x_hi - x_lo < 1e-12:
            break
    return bits_at(math.exp(x_hi))


# -- lower level solver -------------------------------------------------------

@dataclass
class RllResult:
    """
    Relaxed lower-level solution of one operator.

    ``cells``/``prbs`` index the operator's PRBs; ``r`` and ``b`` follow the
    same order.  ``rate`` is the relaxed sum rate and ``lam``/``mu`` are the
    complexity and per-cell fronthaul prices.
    """
    op: int
    cells: np.ndarray
    prbs: np.ndarray
    r: np.ndarray
    b: np.ndarray
    lam: float
    mu: np.ndarray
    rate: float
    complexity: float
    evaluations: int = 0


class _OpProblem:
    """Per-operator arrays handed to the Lagrangian kernel."""

    def __init__(self, scen, op, model):
        self.scen = scen
        self.op = op
        self.model = model
        self.cells, self.prbs = scen.prbs_of(op)
        self.D = np.ascontiguousarray(scen.D[self.cells, self.prbs])
        self.I = np.ascontiguousarray(scen.I[self.cells, self.prbs])
        self.Y = self.D + self.I
        self.cell = np.ascontiguousarray(self.cells.astype(np.int64))
        self.floors = np.ascontiguousarray(min_quant_bits(self.D, self.I))
        # PRBs that cannot carry the lowest rate at any resolution stay idle
        self.dead = np.log2(1.0 + self.D / self.I) <= scen.rmin * (1.0 + 1e-12)

    def floor_bits(self, margin=0.0):
        """Fewest bits per cell keeping every live PRB above the lowest rate."""
        j = self.floors.copy()
        live = ~self.dead
        j[live] = np.maximum(j[live], bits_for_capacity(self.D[live], self.I[live], self.scen.rmin) + margin)
        return np.bincount(self.cells, weights=j, minlength=self.scen.n_cells)

    def masks(self, fixed_r=None, fixed_b=None):
        n = self.D.size
        rf = np.zeros(n, dtype=np.uint8)
        rv = np.zeros(n)
        bf = np.zeros(n, dtype=np.uint8)
        bv = np.zeros(n)
        if fixed_r is not None:
            m = ~np.isnan(fixed_r)
            rf[m] = 1
            rv[m] = fixed_r[m]
        if fixed_b is not None:
            m = ~np.isnan(fixed_b)
            bf[m] = 1
            bv[m] = fixed_b[m]
        rf[self.dead] = 1
        rv[self.dead] = 0.0
        bf[self.dead] = 1
        bv[self.dead] = self.floors[self.dead]
        return rf, rv, bf, bv

    def evaluate(self, lam, masks, budgets, tol):
        rf, rv, bf, bv = masks
        return kernels.rll_lagrangian(float(lam), self.D, self.I, self.Y, self.cell,
                                      self.scen.n_cells, self.floors, rf, rv, bf, bv,
                                      budgets, self.model.A, self.model.B,
                                      self.scen.rmin, self.scen.rmax, tol)


def solve_rll(scen, op, c_slice, b_slice, model=None, tol=1e-10, fixed_r=None, fixed_b=None,
              dual="bisection", max_dual_iter=200, lam_hint=None):
    """
    Relaxed rate and bit allocation of one operator for a given slice.

    The complexity constraint is dualised with price ``lam``.  For a given
    price every cell's problem separates across PRBs once its fronthaul price
    is fixed, so the kernel returns the exact Lagrangian maximiser.  The
    total complexity of that maximiser is non-increasing in ``lam``, so the
    dual optimum is the price at which it meets the budget.

    Parameters
    ----------
    scen : CranScenario
    op : int
    c_slice : float
        Computation slice (bips).
    b_slice : array_like
        ``(K,)`` fronthaul slice per cell (bps).
    model : ComplexityModel, optional
    tol : float
        Relative accuracy of the dual search.
    fixed_r, fixed_b : ndarray, optional
        Per-PRB values to hold fixed (NaN marks a free variable).
    dual : {"bisection", "subgradient"}
        ``"subgradient"`` runs the projected subgradient update with step
        ``1/sqrt(l)`` for ``max_dual_iter`` steps and keeps the best feasible
        iterate.
    lam_hint : float, optional
        Starting price for the bracket search.

    Returns
    -------
    RllResult

    Raises
    ------
    InfeasibleSlice
        If the slice cannot support the lowest rate on every live PRB.
    """
    model = model or ComplexityModel()
    prob = _OpProblem(scen, op, model)
    budgets = np.ascontiguousarray(np.broadcast_to(np.asarray(b_slice, dtype=float), (scen.n_cells,))
                                   / (2.0 * scen.n_re))
    cbudget = float(c_slice) / scen.n_re
    masks = prob.masks(fixed_r, fixed_b)
    count = [0]

    def ev(lam):
        count[0] += 1
        return prob.evaluate(lam, masks, budgets, 1e-12)

    def result(lam, out):
        r, b, mu, cs, _ = out
        return RllResult(op, prob.cells, prob.prbs, r, b, float(lam), mu, float(r.sum()),
                         float(cs) * scen.n_re, count[0])

    if not ev(0.0)[4]:
        raise InfeasibleSlice(f"operator {op}: fronthaul slice below the bit floors")
    # a vanishing price instead of zero: rate first, complexity as tie-break
    out = ev(LAM_FLOOR)
    if out[3] <= cbudget:
        return result(0.0, out)
    if dual == "subgradient":
        return _rll_subgradient(ev, result, cbudget, max_dual_iter)
    if dual != "bisection":
        raise ValueError(f"unknown dual method {dual!r}")
    hi = min(max(lam_hint, 1e-6), 1e12) if lam_hint and lam_hint > LAM_FLOOR else 1.0
    out_hi = ev(hi)
    lo, out_lo = LAM_FLOOR, out
    if out_hi[3] > cbudget:
        while out_hi[3] > cbudget:
            lo, out_lo = hi, out_hi
            hi *= 4.0
            if hi > 1e30:
                raise InfeasibleSlice(f"operator {op}: computation slice below the minimum complexity")
            out_hi = ev(hi)
    else:
        while hi / 4.0 > LAM_FLOOR:
            cand = hi / 4.0
            o = ev(cand)
            if o[3] > cbudget:
                lo, out_lo = cand, o
                break
            hi, out_hi = cand, o
    # Illinois search on log(lam); the feasible side is kept
    xa, xc = math.log(lo), math.log(hi)
    fa, fc = out_lo[3] - cbudget, out_hi[3] - cbudget
    side = 0
    for _ in range(max_dual_iter):
        if xc - xa <= tol or fc > -tol * (1.0 + abs(cbudget)) and fc <= 0:
            break
        if math.isfinite(fa):
            x = (xa * fc - xc * fa) / (fc - fa)
            if not xa < x < xc:
                x = 0.5 * (xa + xc)
        else:
            x = 0.5 * (xa + xc)
        o = ev(math.exp(x))
        fx = o[3] - cbudget
        if fx > 0:
            xa, fa = x, fx
            if side == 1:
                fc *= 0.5
            side = 1
        else:
            xc, fc, out_hi = x, fx, o
            if side == -1 and math.isfinite(fa):
                fa *= 0.5
            side = -1
    return result(math.exp(xc), out_hi)


def _rll_subgradient(ev, result, cbudget, max_iter):
    lam = LAM_FLOOR
    best = None
    for l in range(1, max_iter + 1):
        out = ev(lam)
        if out[3] <= cbudget and (best is None or out[0].sum() > best[1][0].sum()):
            best = (lam, out)
        g = out[3] - cbudget
        if not math.isfinite(g):
            g = 1.0
        lam = max(LAM_FLOOR, lam + g / math.sqrt(l))
    if best is None:
        raise InfeasibleSlice("no feasible dual iterate found")
    return result(*best)


def lagrangian_alternating(scen, op, lam, b_slice, model=None, tol=1e-10, max_iter=500):
    """
    Maximise the Lagrangian by alternating the rate step and the bit step.

    Starts from the lowest rate with bits at their floors and stops once
    neither block moves.  Slower than the kernel; used as a cross-check.

    Returns
    -------
    r, b : ndarray
        In the operator's PRB order.
    """
    model = model or ComplexityModel()
    prob = _OpProblem(scen, op, model)
    if np.any(prob.dead):
        raise ValueError("alternating solver expects every PRB to be usable")
    budgets = np.broadcast_to(np.asarray(b_slice, dtype=float), (scen.n_cells,)) / (2.0 * scen.n_re)
    r = np.full(prob.D.size, scen.rmin)
    b = np.maximum(prob.floors, bits_for_capacity(prob.D, prob.I, r))
    for _ in range(max_iter):
        b_new = b.copy()
        for k in range(scen.n_cells):
            m = prob.cells == k
            if m.any():
                b_new[m] = optimal_bits_given_rates(lam, r[m], budgets[k], prob.floors[m],
                                                    prob.D[m], prob.I[m], model)
        t = capacity(prob.D, prob.I, b_new)
        r_new = np.array([optimal_rate_given_bits(lam, ti, model, scen.rmin, scen.rmax) for ti in t])
        done = np.max(np.abs(r_new - r)) <= tol and np.max(np.abs(b_new - b)) <= tol * 10
        r, b = r_new, b_new
        if done:
            break
    return r, b


def lagrangian_value(r, b, D, I, lam, model):
    """``sum(r) - lam * sum(complexity)`` per channel use."""
    return float(np.sum(r) - lam * np.sum(model.per_use(r, capacity(D, I, b))))


# -- upper level --------------------------------------------------------------

@dataclass
class RulResult:
    """
    Slices chosen by the upper level and the lower-level solutions they induce.

    ``trace`` holds one ``(iteration, objective, per-operator relaxed rates)``
    tuple per iteration.
    """
    c: np.ndarray
    b: np.ndarray
    rll: list
    objective: float
    rates: np.ndarray
    trace: list
    iterations: int


def _slice_floors(scen, model, b_cap):
    """Smallest per-operator slices that keep every lower-level problem feasible."""
    O, K = scen.n_ops, scen.n_cells
    b_lo = np.zeros((O, K))
    c_lo = np.zeros(O)
    for o in range(O):
        prob = _OpProblem(scen, o, model)
        # a small margin keeps the lowest rate strictly below capacity
        b_lo[o] = prob.floor_bits(SLICE_MARGIN_BITS) * 2.0 * scen.n_re
        masks = prob.masks()
        budgets = np.ascontiguousarray(b_lo[o] / (2.0 * scen.n_re))
        cmin = prob.evaluate(1e12, masks, budgets, 1e-12)[3]
        c_lo[o] = max(0.0, cmin * scen.n_re * (1.0 + 1e-6))
    return c_lo, b_lo


def _project(x, lower, cap):
    return lower + project_capped_simplex(x - lower, cap - lower.sum())


def solve_rul(scen, model=None, econ=None, c_cap=90e6, b_cap=120e6, max_iter=100, step=0.5,
              fd_rel=1e-3, tol=1e-6, patience=10, gradient="fd"):
    """
    Split computation and fronthaul capacity among operators.

    Projected subgradient ascent on the weighted profit with step
    ``step / sqrt(n)`` along the gradient normalised in units of the caps.
    Rate gradients come from forward differences of the relaxed lower level
    (``gradient="fd"``) or from its dual prices (``gradient="dual"``).

    Parameters
    ----------
    scen : CranScenario
    model : ComplexityModel, optional
    econ : EconomicModel, optional
    c_cap : float
        Cloud computation limit (bips).
    b_cap : float or array_like
        Fronthaul limit per cell (bps).
    max_iter : int
    step : float
        Initial step as a fraction of the caps.
    fd_rel : float
        Forward-difference step relative to the equal split.
    tol : float
        Stop after ``patience`` iterations whose best objective improved by
        less than ``tol`` relatively.

    Returns
    -------
    RulResult
        The best iterate seen.
    """
    model = model or ComplexityModel()
    O, K, N = scen.n_ops, scen.n_cells, scen.n_re
    econ = econ or EconomicModel(n_ops=O)
    b_cap = np.broadcast_to(np.asarray(b_cap, dtype=float), (K,)).copy()
    c_lo, b_lo = _slice_floors(scen, model, b_cap)
    if c_lo.sum() > c_cap or np.any(b_lo.sum(axis=0) > b_cap):
        raise InfeasibleSlice("caps below the operators' minimum requirements")
    c = _project(np.full(O, c_cap / O), c_lo, c_cap)
    b = np.stack([_project(np.full(O, b_cap[k] / O), b_lo[:, k], b_cap[k]) for k in range(K)], axis=1)
    beta = econ.beta_for(K)
    dc = fd_rel * c_cap / O
    db = fd_rel * b_cap / O
    hints = [None] * O

    def lower(o, cc, bb):
        res = solve_rll(scen, o, cc, bb, model, lam_hint=hints[o])
        return res

    def objective(rates, c, b):
        return profits(econ, c, b, rates, N)[2]

    best = None
    trace = []
    stall = 0
    n_done = 0
    for n in range(1, max_iter + 1):
        sols = [lower(o, c[o], b[o]) for o in range(O)]
        for o in range(O):
            hints[o] = sols[o].lam or None
        rates = np.array([s.rate for s in sols])
        psi = objective(rates, c, b)
        trace.append((n, psi, rates.copy()))
        n_done = n
        if best is None or psi > best[0] + tol * abs(best[0]):
            stall = 0
        else:
            stall += 1
        if best is None or psi > best[0]:
            best = (psi, c.copy(), b.copy(), sols, rates)
        if stall >= patience or n == max_iter:
            break
        gc = np.zeros(O)
        gb = np.zeros((O, K))
        for o in range(O):
            if gradient == "dual":
                dr_c = sols[o].lam / N
                dr_b = sols[o].mu / (2.0 * N)
            else:
                dr_c = (_safe_rate(lower, o, c[o] + dc, b[o]) - rates[o]) / dc
                dr_b = np.empty(K)
                for k in range(K):
                    bb = b[o].copy()
                    bb[k] += db[k]
                    dr_b[k] = (_safe_rate(lower, o, c[o], bb) - rates[o]) / db[k]
            w = econ.ups[o] * econ.rho[o] * N
            gc[o] = w * dr_c + (econ.ups_inp - econ.ups[o]) * econ.psi[o]
            gb[o] = w * dr_b + (econ.ups_inp - econ.ups[o]) * beta[o]
        # normalise in cap units so the step is scale free
        sc, sb = gc * c_cap, gb * b_cap[None, :]
        norm = math.sqrt(float((sc ** 2).sum() + (sb ** 2).sum()))
        if norm == 0.0:
            break
        tau = step / math.sqrt(n) / norm
        c = _project(c + tau * sc * c_cap, c_lo, c_cap)
        b = np.stack([_project(b[:, k] + tau * sb[:, k] * b_cap[k], b_lo[:, k], b_cap[k])
                      for k in range(K)], axis=1)
    psi, c, b, sols, rates = best
    return RulResult(c, b, sols, psi, rates, trace, n_done)


def _safe_rate(lower, o, cc, bb):
    return lower(o, cc, bb).rate


# -- discrete solutions -------------------------------------------------------

@dataclass
class DiscreteAllocation:
    """Discrete rates and bits of one operator (rates of idle PRBs are 0)."""
    op: int
    cells: np.ndarray
    prbs: np.ndarray
    r: np.ndarray
    b: np.ndarray
    rate: float
    feasible: bool
    c_slice: float = 0.0
    b_slice: np.ndarray = None


def check_discrete(scen, op, c_slice, b_slice, r, b, model=None, atol=1e-9):
    """
    Constraint violations of a discrete allocation.

    Returns
    -------
    dict
        ``capacity``: PRB positions with ``r >= t(b)``; ``fronthaul``: cells
        over budget; ``complexity``: excess (<= 0 when met); ``grid``: PRB
        positions off the rate set; ``floors``: active PRB positions below the
        bit floor (an idle PRB forwards nothing, so its bits are unconstrained).
    """
    model = model or ComplexityModel()
    cells, prbs = scen.prbs_of(op)
    D, I = scen.D[cells, prbs], scen.I[cells, prbs]
    t = capacity(D, I, b)
    on = r > 0
    budgets = np.broadcast_to(np.asarray(b_slice, dtype=float), (scen.n_cells,)) / (2.0 * scen.n_re)
    used = np.bincount(cells, weights=b, minlength=scen.n_cells)
    total = float(np.sum(model.per_use(r, t)))
    on_grid = np.isclose(r[:, None], scen.rates[None, :], rtol=0, atol=1e-12).any(axis=1)
    return {
        "capacity": np.nonzero(on & (r >= t))[0],
        "fronthaul": np.nonzero(used > budgets + atol)[0],
        "complexity": total - float(c_slice) / scen.n_re,
        "grid": np.nonzero(on & ~on_grid)[0],
        "floors": np.nonzero(on & (b < min_quant_bits(D, I) - atol))[0],
    }


def _is_feasible(v, atol=1e-9):
    return not (len(v["capacity"]) or len(v["fronthaul"]) or len(v["grid"]) or len(v["floors"])) \
        and v["complexity"] <= atol


def _grid_down(rates, r):
    """Next rate-set value strictly below ``r`` (0 below the lowest rate)."""
    i = np.searchsorted(rates, r, side="left") - 1
    return float(rates[i]) if i >= 0 else 0.0


def _grid_nearest(rates, r):
    i = int(np.argmin(np.abs(rates - r)))
    return float(rates[i])


def _adjust_down(scen, op, c_slice, b_slice, r, b, model, floors):
    """Round variables down, one at a time, until every constraint holds."""
    cells, prbs = scen.prbs_of(op)
    D, I = scen.D[cells, prbs], scen.I[cells, prbs]
    budgets = np.broadcast_to(np.asarray(b_slice, dtype=float), (scen.n_cells,)) / (2.0 * scen.n_re)
    cbudget = float(c_slice) / scen.n_re
    r, b = r.copy(), b.copy()
    for _ in range(100000):
        used = np.bincount(cells, weights=b, minlength=scen.n_cells)
        over = np.nonzero(used > budgets + 1e-9)[0]
        if over.size:
            k = over[0]
            cand = np.nonzero((cells == k) & (b > floors))[0]
            if cand.size == 0:
                break
            s = cand[np.argmax(b[cand])]
            b[s] -= 1.0
            continue
        t = capacity(D, I, b)
        bad = np.nonzero((r > 0) & (r >= t))[0]
        if bad.size:
            for s in bad:
                r[s] = _grid_down(scen.rates, r[s])
            continue
        comp = model.per_use(r, t)
        if comp.sum() > cbudget + 1e-12:
            s = int(np.argmax(comp))
            r[s] = _grid_down(scen.rates, r[s])
            continue
        break
    return r, b


def _fill_up(scen, op, c_slice, b_slice, r, b, model):
    """
    Spend leftover budget without touching feasibility.

    Spare fronthaul bits go one at a time to the PRB whose complexity drops
    the most; then rates step up one grid point at a time, cheapest extra
    complexity per unit of rate first, while capacity and the computation
    slice allow.
    """
    cells, prbs = scen.prbs_of(op)
    D, I = scen.D[cells, prbs], scen.I[cells, prbs]
    budgets = np.broadcast_to(np.asarray(b_slice, dtype=float), (scen.n_cells,)) / (2.0 * scen.n_re)
    cbudget = float(c_slice) / scen.n_re
    r, b = r.copy(), b.copy()
    for k in range(scen.n_cells):
        m = np.nonzero(cells == k)[0]
        if m.size == 0:
            continue
        while b[m].sum() + 1.0 <= budgets[k] + 1e-9:
            t0 = capacity(D[m], I[m], b[m])
            t1 = capacity(D[m], I[m], b[m] + 1.0)
            gain = model.per_use(r[m], t0) - model.per_use(r[m], t1)
            gain = np.where(np.isfinite(gain), gain, 0.0)
            if np.all(gain <= 0):
                gain = t1 - t0
            b[m[int(np.argmax(gain))]] += 1.0
    t = capacity(D, I, b)
    comp = model.per_use(r, t)
    while True:
        idx = np.searchsorted(scen.rates, r, side="right")
        nxt = np.where(idx < scen.rates.size, scen.rates[np.minimum(idx, scen.rates.size - 1)], np.inf)
        ok = nxt < t
        if not ok.any():
            break
        new_c = model.per_use(np.where(ok, nxt, r), t)
        extra = new_c - comp
        ok &= comp.sum() + extra <= cbudget + 1e-12
        if not ok.any():
            break
        cost = np.where(ok, extra / (np.where(ok, nxt, r + 1.0) - r), np.inf)
        s = int(np.argmin(cost))
        r[s] = nxt[s]
        comp[s] = new_c[s]
    return r, b


def round_ra(scen, rll, c_slice, b_slice, model=None, fill=True):
    """
    Round a relaxed solution in one pass, then repair violations.

    Rates go to the nearest rate-set value and bits to the nearest integer.
    While a constraint is violated the variable contributing most to it is
    rounded down: the largest bit count in an over-budget cell, the rate of
    any PRB above its capacity, or the rate with the highest complexity.
    With ``fill`` the leftover budget is then spent by stepping rates up.

    Returns
    -------
    DiscreteAllocation
    """
    model = model or ComplexityModel()
    cells, prbs = rll.cells, rll.prbs
    D, I = scen.D[cells, prbs], scen.I[cells, prbs]
    floors = min_quant_bits(D, I)
    r = np.array([_grid_nearest(scen.rates, x) if x > 0 else 0.0 for x in rll.r])
    b = np.maximum(np.round(rll.b), floors)
    r, b = _adjust_down(scen, rll.op, c_slice, b_slice, r, b, model, floors)
    if fill:
        r, b = _fill_up(scen, rll.op, c_slice, b_slice, r, b, model)
    v = check_discrete(scen, rll.op, c_slice, b_slice, r, b, model)
    return DiscreteAllocation(rll.op, cells, prbs, r, b, float(r.sum()), _is_feasible(v),
                              float(c_slice), np.asarray(b_slice, dtype=float))


def _neighbours(kind, x, rates, floor):
    """Grid values just below and above ``x``, nearest first."""
    if kind == "r":
        lo = _grid_down(rates, x * (1.0 + 1e-12) + 1e-15)
        i = np.searchsorted(rates, x * (1.0 - 1e-12), side="left")
        hi = float(rates[i]) if i < rates.size else lo
    else:
        lo = max(floor, math.floor(x + 1e-12))
        hi = max(floor, math.ceil(x - 1e-12))
    return (lo, hi) if abs(x - lo) <= abs(hi - x) else (hi, lo)


def _grid_step(kind, near, rates):
    if kind == "b":
        return 1.0
    lo, hi = min(near), max(near)
    if hi > lo:
        return hi - lo
    i = min(max(int(np.searchsorted(rates, lo)), 1), rates.size - 1)
    return float(rates[i] - rates[i - 1])


def round_ir(scen, rll, c_slice, b_slice, model=None, fill=True):
    """
    Round a relaxed solution one variable at a time.

    Each pass picks the free variable lying closest to its grid (a rate-set
    value for rates, an integer for bits), fixes it to the adjacent grid
    value whose re-solved relaxed problem has the larger sum rate, and keeps
    the slice unchanged.  When neither neighbour is feasible the value is
    lowered further.  With ``fill`` the leftover budget is spent as in
    `round_ra`.

    Returns
    -------
    DiscreteAllocation
    """
    model = model or ComplexityModel()
    op = rll.op
    cells, prbs = rll.cells, rll.prbs
    D, I = scen.D[cells, prbs], scen.I[cells, prbs]
    floors = min_quant_bits(D, I)
    n = cells.size
    fixed = {"r": np.full(n, np.nan), "b": np.full(n, np.nan)}
    dead = np.log2(1.0 + D / I) <= scen.rmin * (1.0 + 1e-12)
    fixed["r"][dead] = 0.0
    fixed["b"][dead] = floors[dead]
    cur = rll
    hint = rll.lam or None

    def attempt(kind, s, v):
        trial = {k: a.copy() for k, a in fixed.items()}
        trial[kind][s] = v
        try:
            return solve_rll(scen, op, c_slice, b_slice, model, fixed_r=trial["r"],
                             fixed_b=trial["b"], lam_hint=hint)
        except InfeasibleSlice:
            return None

    stuck = False
    while np.isnan(fixed["r"]).any() or np.isnan(fixed["b"]).any():
        best = None
        for kind, vals in (("r", cur.r), ("b", cur.b)):
            for s in np.nonzero(np.isnan(fixed[kind]))[0]:
                near = _neighbours(kind, vals[s], scen.rates, floors[s])
                # distance in grid steps so rates and bits compete fairly
                d = abs(near[0] - vals[s]) / _grid_step(kind, near, scen.rates)
                if best is None or d < best[0]:
                    best = (d, kind, s, near)
        _, kind, s, near = best
        chosen = None
        for v in dict.fromkeys(near):
            res = attempt(kind, s, v)
            if res is not None and (chosen is None or res.rate > chosen[1].rate + 1e-12):
                chosen = (v, res)
        v = min(near)
        while chosen is None:
            v = _grid_down(scen.rates, v) if kind == "r" else v - 1.0
            if (kind == "r" and v < 0.0) or (kind == "b" and v < floors[s]):
                break
            res = attempt(kind, s, v)
            if res is not None:
                chosen = (v, res)
        if chosen is None:
            stuck = True
            break
        fixed[kind][s] = chosen[0]
        cur = chosen[1]
        hint = cur.lam or hint
    if stuck:
        # finish from the last feasible relaxed point and let the repair pass fix it
        r = np.where(np.isnan(fixed["r"]), [_grid_down(scen.rates, x * (1.0 + 1e-12) + 1e-15) for x in cur.r],
                     fixed["r"])
        b = np.where(np.isnan(fixed["b"]), np.round(cur.b), fixed["b"])
    else:
        r, b = cur.r.copy(), cur.b.copy()
    r, b = _adjust_down(scen, op, c_slice, b_slice, r, np.maximum(np.round(b), floors), model, floors)
    if fill:
        r, b = _fill_up(scen, op, c_slice, b_slice, r, b, model)
    v = check_discrete(scen, op, c_slice, b_slice, r, b, model)
    return DiscreteAllocation(op, cells, prbs, r, b, float(r.sum()), _is_feasible(v),
                              float(c_slice), np.asarray(b_slice, dtype=float))


# -- greedy baseline ----------------------------------------------------------

def _waterfill_capacity(D, I, budget, tol=1e-12):
    """
    Bits maximising the summed capacity under a budget, ``b >= 0``.

    The capacity is concave only above the real-valued bit floor, so each PRB
    takes the root of ``t'(b) = nu`` on that branch (0 when below zero or
    when ``nu`` exceeds the largest slope).
    """
    Y = D + I
    cY = QCONST * Y
    u_peak = np.sqrt(I * Y) / cY
    slope_peak = 2.0 * QCONST * u_peak * Y * D / ((I + cY * u_peak) * (Y + cY * u_peak))

    def bits(nu):
        # nu c^2Y^2 u^2 + (nu cY (I+Y) - 2 cY D) u + nu I Y = 0, smaller root
        a = nu * cY ** 2
        bq = nu * cY * (I + Y) - 2.0 * cY * D
        cq = nu * I * Y
        disc = np.maximum(bq * bq - 4.0 * a * cq, 0.0)
        u = (-bq - np.sqrt(disc)) / (2.0 * a)
        with np.errstate(divide="ignore"):
            b = -np.log2(u) / 2.0
        b = np.where(nu >= slope_peak, 0.0, b)
        return np.maximum(b, 0.0)

    if budget <= 0:
        return np.zeros_like(D)
    x_lo, x_hi = -700.0, math.log(float(slope_peak.max())) + 1.0
    for _ in range(300):
        x = 0.5 * (x_lo + x_hi)
        if bits(math.exp(x)).sum() > budget:
            x_lo = x
        else:
            x_hi = x
        if x_hi - x_lo < tol:
            break
    return bits(math.exp(x_hi))


def greedy_slices(scen, c_cap, b_cap):
    """Slices proportional to each operator's Shannon-limit sum rate."""
    O, K = scen.n_ops, scen.n_cells
    b_cap = np.broadcast_to(np.asarray(b_cap, dtype=float), (K,))
    shannon = scen.shannon_rates()
    per_cell = np.zeros((O, K))
    for o in range(O):
        cells, prbs = scen.prbs_of(o)
        per_cell[o] = np.bincount(cells, weights=shannon[cells, prbs], minlength=K)
    tot = per_cell.sum(axis=1)
    c = c_cap * tot / tot.sum()
    col = per_cell.sum(axis=0)
    b = b_cap[None, :] * np.divide(per_cell, col[None, :], out=np.zeros_like(per_cell), where=col > 0)
    return c, b


def greedy_alloc(scen, model=None, c_cap=90e6, b_cap=120e6):
    """
    Two-stage greedy baseline.

    Slices follow Shannon-limit rate shares.  Each cell water-fills its bits
    on the summed capacity and floors them; each rate is the largest rate-set
    value below the resulting capacity; then the rate with the highest
    complexity is stepped down until the computation slice is met.

    Returns
    -------
    list of DiscreteAllocation
        One per operator.
    """
    model = model or ComplexityModel()
    c_sl, b_sl = greedy_slices(scen, c_cap, b_cap)
    out = []
    for o in range(scen.n_ops):
        cells, prbs = scen.prbs_of(o)
        D, I = scen.D[cells, prbs], scen.I[cells, prbs]
        b = np.zeros(cells.size)
        for k in range(scen.n_cells):
            m = cells == k
            if m.any():
                b[m] = np.floor(_waterfill_capacity(D[m], I[m], b_sl[o, k] / (2.0 * scen.n_re)) + 1e-9)
        t = capacity(D, I, b)
        r = np.array([_grid_down(scen.rates, x) for x in t])
        cbudget = c_sl[o] / scen.n_re
        comp = model.per_use(r, t)
        while comp.sum() > cbudget:
            s = int(np.argmax(comp))
            r[s] = _grid_down(scen.rates, r[s])
            comp[s] = model.per_use(r[s], t[s])
        ok = _is_feasible(check_discrete(scen, o, c_sl[o], b_sl[o], r, b, model))
        out.append(DiscreteAllocation(o, cells, prbs, r, b, float(r.sum()), ok, float(c_sl[o]), b_sl[o]))
    return out


# -- end to end ---------------------------------------------------------------

@dataclass
class CranOutcome:
    """Per-operator slices, rates and profits of one method."""
    method: str
    c: np.ndarray
    b: np.ndarray
    rates: np.ndarray
    g_inp: np.ndarray
    g_op: np.ndarray
    objective: float
    feasible: bool
    iterations: int = 0
    trace: list = field(default_factory=list)


def allocate(scen, method="ir", model=None, econ=None, c_cap=90e6, b_cap=120e6, rul=None, **kw):
    """
    Run one allocation method end to end.

    Parameters
    ----------
    method : {"relaxed", "ir", "ra", "greedy"}
    rul : RulResult, optional
        Reuse an upper-level solution for the relaxed/rounded methods.

    Returns
    -------
    CranOutcome
    """
    model = model or ComplexityModel()
    econ = econ or EconomicModel(n_ops=scen.n_ops)
    if method == "greedy":
        allocs = greedy_alloc(scen, model, c_cap, b_cap)
        c = np.array([a.c_slice for a in allocs])
        b = np.stack([a.b_slice for a in allocs])
        rates = np.array([a.rate for a in allocs])
        g_inp, g_op, obj = profits(econ, c, b, rates, scen.n_re)
        return CranOutcome(method, c, b, rates, g_inp, g_op, obj, all(a.feasible for a in allocs))
    if method not in ("relaxed", "ir", "ra"):
        raise ValueError(f"unknown method {method!r}")
    rul = rul or solve_rul(scen, model, econ, c_cap, b_cap, **kw)
    if method == "relaxed":
        rates = rul.rates.copy()
        feasible = True
    else:
        fn = round_ir if method == "ir" else round_ra
        allocs = [fn(scen, rul.rll[o], rul.c[o], rul.b[o], model) for o in range(scen.n_ops)]
        rates = np.array([a.rate for a in allocs])
        feasible = all(a.feasible for a in allocs)
    g_inp, g_op, obj = profits(econ, rul.c, rul.b, rates, scen.n_re)
    return CranOutcome(method, rul.c, rul.b, rates, g_inp, g_op, obj, feasible, rul.iterations, rul.trace)
