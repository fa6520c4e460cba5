"""
Subchannel and power allocation for OFDMA macro/femto networks.

QAM target SINRs, per-subchannel feasibility with Pareto-optimal powers,
weight-based distributed assignment (fixed rate, adaptive rate, hybrid access
and downlink variants) and an exhaustive oracle for small networks.

Gains are ``(n_bs, n_users, n_sub)`` tensors; BS 0 is the macro BS and users
homed there are MUEs.  The macro assignment ``a1`` has one row per MUE (in
``s.mues`` order) and is kept fixed.
"""
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import SingularMatrixError, hungarian_min_assign, inverse_q, solve_linear, spectral_radius


MODULATIONS = (4, 16, 64, 256, 1024)
WEIGHT_CAP = 2.0 ** 60
ENUM_GUARD = 1_000_000
RATE_RTOL = 1e-9


def qam_target_sinr(s, ber=1e-3, convention="formula"):
    """
    SINR needed by square ``s``-QAM to keep the Gray-coded BER at `ber`.

    Parameters
    ----------
    s : int
        Constellation size, a power of 4.
    ber : float
        Target bit error rate.
    convention : {"formula", "table"}
        ``"formula"`` uses ``x_s = 2(1-1/sqrt(s))/log2(s)``, ``y_s = 3/(2(s-1))``;
        ``"table"`` uses ``x_s = 4(1-1/sqrt(s))/log2(s)``, ``y_s = 3/(s-1)``.

    Returns
    -------
    float
    """
    s = int(s)
    if s < 4 or s & (s - 1) or int(math.log2(s)) % 2:
        raise ValueError(f"constellation size must be a power of 4, got {s}")
    bits = math.log2(s)
    if convention == "formula":
        xs, ys = 2.0 * (1.0 - 1.0 / math.sqrt(s)) / bits, 3.0 / (2.0 * (s - 1))
    elif convention == "table":
        xs, ys = 4.0 * (1.0 - 1.0 / math.sqrt(s)) / bits, 3.0 / (s - 1)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return inverse_q(ber / xs) ** 2 / ys


def spectral_efficiency(s, n_sub):
    """Bits/s/Hz of one subchannel carrying ``s``-QAM out of `n_sub`."""
    return math.log2(s) / n_sub


def fairness_index(rates):
    """Jain's index ``(sum r)^2 / (M sum r^2)``."""
    r = np.asarray(rates, dtype=float)
    if r.size == 0 or not np.any(r > 0):
        raise ValueError("fairness index undefined without a positive rate")
    r = r / r.max()  # scale-free; avoids underflow of tiny rates
    return float(r.sum() ** 2 / (r.size * np.sum(r * r)))


@dataclass
class OfdmaParams:
    """
    Knobs of the allocation algorithms.

    ``mu`` defaults to ``N`` for the fixed-rate algorithm and 2 for the
    adaptive variants.  ``bs_caps`` holds per-BS power budgets (downlink).
    ``patience`` is the number of budget violations a femtocell tolerates at
    one ``(s, tau)`` choice before stepping down its list.  With
    ``hybrid_fallback`` the hybrid-access run falls back to closed access
    when admitting MUEs ended with a lower objective.
    """
    s_f: int = 4
    s_m: int = 4
    ber: float = 1e-3
    V: float = 10.0
    max_iter: int = 2000
    tol: float = 1e-10
    modulations: tuple = MODULATIONS
    mu: float = None
    bs_caps: tuple = None
    convention: str = "formula"
    patience: int = 50
    hybrid_fallback: bool = True

    def gamma(self, s):
        return qam_target_sinr(s, self.ber, self.convention)


@dataclass
class SubchannelPlan:
    """
    Assignment ``A`` and powers ``P`` (users x subchannels) with per-cell choices.

    ``tau`` and ``modulation`` are indexed by BS (entry 0, the macro BS, is unused).
    """
    A: np.ndarray
    P: np.ndarray
    tau: np.ndarray
    modulation: np.ndarray
    association: np.ndarray
    feasible: bool
    objective: float
    iterations: int = 0
    converged: bool = True
    cell_rates: dict = field(default_factory=dict)
    fallback: bool = False


# -- interference and feasibility -------------------------------------------

def _n_sub(s):
    if s.gains.ndim != 3:
        raise ValueError("OFDMA needs a (bs, users, subchannels) gain tensor")
    return s.gains.shape[2]


def as_multicarrier(s):
    """View a single-carrier scenario as one with a trailing subchannel axis."""
    return s.with_gains(s.gains[:, :, None]) if s.gains.ndim == 2 else s


def link_interference(s, A, P, assoc, downlink=False):
    """
    Effective interference ``I[i, n]`` of every user on every subchannel.

    Only transmissions from other cells count; the result is normalised by the
    user's own link gain.
    """
    h = s.gains
    x = np.asarray(A, dtype=float) * np.asarray(P, dtype=float)
    m = np.arange(s.n_users)
    own = h[assoc, m, :]
    if downlink:
        tx = np.zeros((s.n_bs, h.shape[2]))
        np.add.at(tx, assoc, x)
        total = np.einsum("bn,bin->in", tx, h)
        same = tx[assoc] * own
        return (total - same + s.noise[assoc][:, None]) / own
    rx = np.einsum("bjn,jn->bn", h, x)
    rx_in = np.zeros_like(rx)
    for b in range(s.n_bs):
        members = assoc == b
        if members.any():
            rx_in[b] = np.einsum("jn,jn->n", h[b][members], x[members])
    return (rx[assoc] - rx_in[assoc] + s.noise[assoc][:, None]) / own


def cochannel_system(s, A, targets, n, assoc, downlink=False):
    """
    Users on subchannel `n` with their normalised coupling matrix ``GH`` and noise vector ``g``.

    Returns
    -------
    users : ndarray of int
    gh : ndarray
    g : ndarray
    """
    users = np.nonzero(np.asarray(A)[:, n])[0]
    h = s.gains[:, :, n]
    b = assoc[users]
    if downlink:
        direct = h[b, users]
        cross = h[b[None, :], users[:, None]]          # [i, j] = gain from BS of j to user i
    else:
        direct = h[b, users]
        cross = h[b[:, None], users[None, :]]          # [i, j] = gain from user j at BS of i
    gamma = np.asarray(targets, dtype=float)[users]
    coupling = cross / direct[:, None]
    coupling[b[:, None] == b[None, :]] = 0.0
    gh = gamma[:, None] * coupling
    g = gamma * s.noise[b] / direct
    return users, gh, g


def check_sa_feasible(s, A, targets, assoc=None, downlink=False, bs_caps=None):
    """
    Feasibility of an assignment and its Pareto-optimal powers.

    Parameters
    ----------
    s : Scenario
    A : ndarray
        ``(users, subchannels)`` 0/1 assignment.
    targets : ndarray
        Target SINR per user.
    assoc : ndarray of int, optional
        Serving BS per user (home BS by default).
    downlink : bool
        Use downlink coupling and per-BS power caps.
    bs_caps : array_like, optional
        Per-BS power budgets for the downlink.

    Returns
    -------
    feasible : bool
    P : ndarray or None
        Pareto powers when feasible.
    """
    assoc = s.home if assoc is None else np.asarray(assoc)
    A = np.asarray(A)
    P = np.zeros(A.shape)
    for n in range(A.shape[1]):
        users, gh, g = cochannel_system(s, A, targets, n, assoc, downlink)
        if users.size == 0:
            continue
        if spectral_radius(gh) >= 1.0:
            return False, None
        try:
            p = solve_linear(np.eye(users.size) - gh, g)
        except SingularMatrixError:
            return False, None
        if np.any(p < 0):
            return False, None
        P[users, n] = p
    slack = 1.0 + 1e-12
    if downlink:
        caps = np.asarray(bs_caps, dtype=float)
        load = np.zeros(s.n_bs)
        np.add.at(load, assoc, P.sum(axis=1))
        ok = np.all(load <= caps * slack)
    else:
        ok = np.all(P.sum(axis=1) <= s.max_powers * slack)
    return (True, P) if ok else (False, None)


@dataclass
class FMResult:
    powers: np.ndarray
    converged: bool
    diverged: bool
    iterations: int


def _growth_certificate(gh, x):
    """
    True when some non-zero ``0 <= y <= x`` satisfies ``GH y >= y`` on its support.

    Such a vector bounds the Perron root from below by one.  Components that
    fail the test are dropped until the rest pass or nothing is left.
    """
    y = np.where(x > 0, x, 0.0)
    while np.any(y > 0):
        fail = (y > 0) & (gh @ y < y)
        if not fail.any():
            return True
        y[fail] = 0.0
    return False


def foschini_miljanic(gh, g, tol=1e-12, max_iter=100_000, divergence_window=200):
    """
    Iterate ``p <- GH p + g`` from zero.

    From zero the iterates increase monotonically and their increments follow
    ``d <- GH d``.  Both tests use ``S``, the sum of the last ``len(g)``
    increments, which also follows ``S <- GH S`` and smooths couplings whose
    increments alternate between users.  With ``q = max S'/S < 1`` the
    remaining growth is at most ``S' q / (1 - q)`` per user, and iteration
    stops once that is within `tol` of ``p``.  A growth certificate on ``S``,
    or an overflowing iterate, within the first `divergence_window`
    iterations declares divergence; if neither test has settled by then the
    Perron root of ``GH`` decides.

    Returns
    -------
    FMResult
    """
    gh = np.asarray(gh, dtype=float)
    g = np.asarray(g, dtype=float)
    p = np.zeros_like(g)
    if not np.any(g > 0):
        return FMResult(p, True, False, 0)
    m = g.size
    recent = []
    window = np.zeros_like(g)
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            new = gh @ p + g
            d = new - p
        p = new
        if not np.all(np.isfinite(p)):
            return FMResult(p, False, True, it)
        prev = window
        recent.append(d)
        if len(recent) > m:
            recent.pop(0)
        window = np.sum(recent, axis=0)
        if it <= m:
            continue
        live = prev > 0
        if np.all(window[~live] == 0):
            q = np.max(window[live] / prev[live])
            if q < 1 and np.all(window * q <= tol * (1 - q) * p):
                return FMResult(p, True, False, it)
        if it <= divergence_window and _growth_certificate(gh, window):
            return FMResult(p, False, True, it)
        if it == divergence_window and spectral_radius(gh) >= 1.0:
            # slow growth the certificate has not resolved yet
            return FMResult(p, False, True, it)
    return FMResult(p, False, False, max_iter)


# -- weights -----------------------------------------------------------------

def assignment_weights(p_min, p_max, tau, alpha, theta, mu):
    """
    Uplink assignment weights ``chi * p_min``.

    ``chi`` is ``alpha`` when the power fits the per-subchannel share
    ``p_max / tau``, ``alpha * theta`` when it only fits the total budget and
    ``alpha * mu * theta`` otherwise.

    Parameters
    ----------
    p_min : ndarray
        ``(users, subchannels)`` estimated powers.
    p_max : ndarray
        Budget per user.
    tau : int
        Subchannels per user in the cell.
    alpha, theta : ndarray
        Scaling factors, same shape as `p_min`.
    mu : float

    Returns
    -------
    ndarray
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    cap = np.asarray(p_max, dtype=float)[:, None]
    chi = np.where(p_min <= cap / tau, alpha, np.where(p_min <= cap, alpha * theta, alpha * mu * theta))
    return chi * p_min


def downlink_weights(p_min, bs_cap, alpha, theta):
    """Downlink weights: ``alpha * theta * p_min``, infinite when `p_min` exceeds the BS budget."""
    return np.where(p_min <= bs_cap, alpha * theta * p_min, np.inf)


def _solve_cell(weights, rows, avail, tau):
    """
    Hungarian assignment of `tau` virtual copies of each row to distinct subchannels.

    Returns the chosen (row, subchannel) pairs and the total weight (``inf`` if
    any forbidden or impossible assignment is needed).
    """
    if tau == 0:
        return [], 0.0
    if tau * len(rows) > len(avail):
        return None, math.inf
    w = weights[np.ix_(rows, avail)]
    finite = np.isfinite(w)
    if not finite.any():
        return None, math.inf
    big = (np.abs(w[finite]).sum() + 1.0) * (tau * len(rows) + 1)
    cost = np.repeat(np.where(finite, w, big), tau, axis=0)
    assign, _ = hungarian_min_assign(cost)
    pairs = [(rows[r // tau], avail[c]) for r, c in enumerate(assign)]
    total = sum(weights[i, n] for i, n in pairs)
    # forbidden (infinite) entries are never assigned
    return [(i, n) for i, n in pairs if np.isfinite(weights[i, n])], float(total)


def theta_list(m_k, n_sub, modulations):
    """
    Candidate ``(s, tau)`` pairs sorted by decreasing minimum rate ``log2(s) tau / N``.

    Ties prefer more subchannels at a lower order; a single ``(min s, 0)`` closes the list.
    """
    top = n_sub // m_k
    pairs = [(s, t) for s in modulations for t in range(1, top + 1)]
    pairs.sort(key=lambda st: (-math.log2(st[0]) * st[1], -st[1]))
    return pairs + [(min(modulations), 0)]


def macro_assignment(s, n_sub, gamma_m, per_mue=None):
    """
    Fixed macro assignment giving each MUE ``N // M1`` subchannels at minimum total power.

    Parameters
    ----------
    s : Scenario
    n_sub : int
    gamma_m : float
        MUE target SINR.
    per_mue : int, optional

    Returns
    -------
    ndarray
        ``(n_mue, n_sub)`` 0/1 matrix.

    Raises
    ------
    ValueError
        If the macro tier alone is infeasible.
    """
    mues = s.mues
    if mues.size == 0:
        return np.zeros((0, n_sub), dtype=np.int8)
    k = per_mue if per_mue is not None else n_sub // mues.size
    if k < 1:
        raise ValueError("fewer subchannels than MUEs")
    cost = gamma_m * s.noise[0] / s.gains[0][mues]
    pairs, _ = _solve_cell(cost, list(range(mues.size)), list(range(n_sub)), k)
    a1 = np.zeros((mues.size, n_sub), dtype=np.int8)
    for r, n in pairs:
        a1[r, n] = 1
    A = np.zeros((s.n_users, n_sub), dtype=np.int8)
    A[mues] = a1
    targets = np.full(s.n_users, gamma_m)
    if not check_sa_feasible(s, A, targets)[0]:
        raise ValueError("macro assignment infeasible: MUE budgets cannot meet the target")
    return a1


# -- distributed engine ------------------------------------------------------

class _Allocator:
    """State machine shared by the fixed-rate, adaptive, hybrid and downlink algorithms."""

    def __init__(self, s, a1, params, lists, mu, reset_theta, hybrid=False, downlink=False):
        self.s = s
        self.p = params
        self.N = _n_sub(s)
        self.mues = s.mues
        self.femtos = [k for k in range(s.n_bs) if k != 0]
        self.members = {k: s.users_of(k) for k in self.femtos}
        self.lists = lists
        self.t = {k: 0 for k in self.femtos}
        self.mu = mu
        self.reset_theta = reset_theta
        self.hybrid = hybrid
        self.downlink = downlink
        self.gamma_m = params.gamma(params.s_m)
        M = s.n_users
        self.A = np.zeros((M, self.N), dtype=np.int8)
        a1 = np.asarray(a1, dtype=np.int8)
        if a1.shape != (self.mues.size, self.N):
            raise ValueError(f"macro assignment must have shape ({self.mues.size}, {self.N})")
        self.A[self.mues] = a1
        self.P = np.zeros((M, self.N))
        self.alpha = np.ones((M, self.N))
        self.theta = np.ones((M, self.N))
        self.rho = {k: False for k in self.femtos}
        self.strikes = {k: 0 for k in self.femtos}
        self.stable = 0
        self.assoc = s.home.copy()
        self.Q = {k: 0 for k in self.femtos}
        if downlink:
            caps = params.bs_caps
            if caps is None:
                raise ValueError("downlink needs per-BS power caps")
            self.caps = np.broadcast_to(np.asarray(caps, dtype=float), (s.n_bs,)).copy()

    def s_tau(self, k):
        return self.lists[k][self.t[k]]

    def targets(self):
        tg = np.full(self.s.n_users, self.gamma_m)
        for k in self.femtos:
            tg[self.members[k]] = self.p.gamma(self.s_tau(k)[0])
        return tg

    def _hosted(self, k):
        return [i for i in self.mues if self.assoc[i] == k]

    def _used(self, k):
        rows = list(self.members[k]) + self._hosted(k)
        return set(np.nonzero(self.A[rows].any(axis=0))[0]) if rows else set()

    def _admit(self, I):
        """Move at most one macro MUE to the femtocell that needs the least power for it."""
        h = self.s.gains
        x = self.A * self.P
        best = None
        for k in self.femtos:
            others = self.assoc != k
            rx = np.einsum("jn,jn->n", h[k][others], x[others])
            for i in self.mues:
                if self.assoc[i] != 0:
                    continue
                sub = np.nonzero(self.A[i])[0]
                if sub.size == 0 or sub.size > self.Q[k] or set(sub) & self._used(k):
                    continue
                i_k = (rx[sub] - x[i, sub] * h[k, i, sub] + self.s.noise[k]) / h[k, i, sub]
                p_k = self.gamma_m * i_k.sum()
                p_1 = self.gamma_m * I[i, sub].sum()
                if p_k < min(p_1, self.s.max_powers[i]):
                    if best is None or (p_k, i, k) < best:
                        best = (p_k, i, k)
        if best is None:
            return False
        _, i, k = best
        self.assoc[i] = k
        self.Q[k] -= int(self.A[i].sum())
        self.rho[k] = False
        return True

    def _victim_alpha(self, i_victim, n_star):
        """Double alpha of the FUE that hurts the victim most on subchannel `n_star`."""
        h = self.s.gains
        fues = [j for k in self.femtos for j in self.members[k]]
        if not fues:
            return
        if self.downlink:
            score = [self.A[j, n_star] * self.P[j, n_star] * h[self.assoc[j], i_victim, n_star] for j in fues]
        else:
            score = [self.A[j, n_star] * self.P[j, n_star] * h[0, j, n_star] for j in fues]
        j = fues[int(np.argmax(score))]
        if score[fues.index(j)] <= 0:
            return
        self.alpha[j, n_star] = min(2.0 * self.alpha[j, n_star], WEIGHT_CAP)
        self.rho[self.assoc[j]] = False

    def step(self):
        s, N = self.s, self.N
        I = link_interference(s, self.A, self.P, self.assoc, self.downlink)
        admitted = self.hybrid and self._admit(I)
        if admitted:
            I = link_interference(s, self.A, self.P, self.assoc, self.downlink)
        newA = self.A.copy()
        newP = np.zeros_like(self.P)
        violated = False
        count = self.A.sum(axis=0)

        # macro tier
        macro = [i for i in self.mues if self.assoc[i] == 0]
        pmin_m = {i: self.A[i] * I[i] * self.gamma_m for i in macro}
        if self.downlink:
            beta = sum(v.sum() for v in pmin_m.values()) / self.caps[0] if macro else 0.0
            betas = {i: beta for i in macro}
        else:
            betas = {i: pmin_m[i].sum() / s.max_powers[i] for i in macro}
        victims = []
        for i in macro:
            b = betas[i]
            newP[i] = pmin_m[i] / b if b > 1 else pmin_m[i]
            if b > 1:
                violated = True
                masked = np.where((self.A[i] > 0) & (count > 1), pmin_m[i], -np.inf)
                if np.isfinite(masked).any():
                    victims.append((masked.max(), i, int(np.argmax(masked))))
        if self.downlink and victims:
            victims = [max(victims, key=lambda v: (v[0], -v[1]))]
        for _, i, n_star in victims:
            self._victim_alpha(i, n_star)

        # femto tier
        moved = False
        for k in self.femtos:
            rows = list(self.members[k])
            hosted = self._hosted(k)
            for i in hosted:
                pm = self.A[i] * I[i] * self.gamma_m
                b = pm.sum() / s.max_powers[i]
                newP[i] = pm / b if b > 1 else pm
                violated |= b > 1
            if not rows:
                continue
            sk, tau = self.s_tau(k)
            pmin = I[rows] * self.p.gamma(sk)
            changed = False
            if not self.rho[k]:
                avail = sorted(set(range(N)) - {n for i in hosted for n in np.nonzero(self.A[i])[0]})
                if tau > 0:
                    if self.downlink:
                        w = downlink_weights(pmin, self.caps[k], self.alpha[rows], self.theta[rows])
                    else:
                        w = assignment_weights(pmin, s.max_powers[rows], tau, self.alpha[rows], self.theta[rows], self.mu)
                    pairs, W = _solve_cell(w, list(range(len(rows))), avail, tau)
                else:
                    pairs, W = [], 0.0
                newA[rows] = 0
                for r, n in pairs or []:
                    newA[rows[r], n] = 1
                budget = self.caps[k] if self.downlink else s.max_powers[rows].sum()
                stalled = self.strikes[k] >= self.p.patience
                if (W > self.p.V * budget or stalled) and self.t[k] + 1 < len(self.lists[k]):
                    self.strikes[k] = 0
                    self.t[k] += 1
                    changed = True
                    if self.reset_theta:
                        self.theta[rows] = 1.0
            ak = newA[rows]
            demand = ak * pmin
            ok_all = True
            if self.downlink:
                b = demand.sum() / self.caps[k]
                newP[rows] = demand / b if b > 1 else demand
                if b > 1:
                    ok_all = False
                    r, n = np.unravel_index(int(np.argmax(demand)), demand.shape)
                    self.theta[rows[r], n] = min(2.0 * self.theta[rows[r], n], WEIGHT_CAP)
            else:
                for r, i in enumerate(rows):
                    b = demand[r].sum() / s.max_powers[i]
                    newP[i] = demand[r] / b if b > 1 else demand[r]
                    if b > 1:
                        ok_all = False
                        n = int(np.argmax(demand[r]))
                        self.theta[i, n] = min(2.0 * self.theta[i, n], WEIGHT_CAP)
            violated |= not ok_all
            self.strikes[k] += not ok_all
            self.rho[k] = ok_all and not changed
            if self.hybrid:
                if changed:
                    self.Q[k] = N - self.s_tau(k)[1] * len(rows)
                    for i in hosted:
                        self.assoc[i] = 0
                        moved = True
                else:
                    used = newA[rows + hosted].any(axis=0).sum()
                    self.Q[k] = N - int(used)
            moved |= changed
        delta = np.max(np.abs(newP - self.P)) if newP.size else 0.0
        same = np.array_equal(newA, self.A)
        self.A, self.P = newA, newP
        scale = float(np.max(s.max_powers)) if not self.downlink else float(np.max(self.caps))
        done = (not violated) and same and not moved and not admitted and delta <= self.p.tol * scale
        self.stable = self.stable + 1 if same and not moved and not admitted else 0
        if not done and self.stable >= self.p.patience:
            self._settle()
        return done

    def _settle(self):
        """
        Resolve a slowly moving power iteration on a frozen assignment.

        A feasible assignment jumps to its Pareto powers (the iteration's limit);
        otherwise every femtocell on an offending subchannel is pushed down its list.
        """
        self.stable = 0
        targets = self.targets()
        caps = self.caps if self.downlink else None
        ok, P = check_sa_feasible(self.s, self.A, targets, self.assoc, self.downlink, caps)
        if ok:
            self.P = P
            return
        bad = set()
        pareto = np.zeros_like(self.P)
        for n in range(self.N):
            users, gh, g = cochannel_system(self.s, self.A, targets, n, self.assoc, self.downlink)
            if users.size == 0:
                continue
            if spectral_radius(gh) >= 1.0:
                bad.update(int(self.assoc[u]) for u in users)
                continue
            pareto[users, n] = solve_linear(np.eye(users.size) - gh, g)
        if self.downlink:
            load = np.zeros(self.s.n_bs)
            np.add.at(load, self.assoc, pareto.sum(axis=1))
            bad.update(int(b) for b in np.nonzero(load > self.caps)[0])
        else:
            over = pareto.sum(axis=1) > self.s.max_powers
            for i in np.nonzero(over)[0]:
                shared = self.A[:, self.A[i] > 0].any(axis=1)
                bad.update(int(self.assoc[j]) for j in np.nonzero(shared)[0])
        for k in bad - {0}:
            if k in self.strikes and self.members[k].size:
                self.strikes[k] = self.p.patience
                self.rho[k] = False

    def run(self):
        trace = []
        converged = False
        it = 0
        for it in range(1, self.p.max_iter + 1):
            converged = self.step()
            taus = [self.s_tau(k)[1] for k in self.femtos if len(self.members[k])]
            trace.append({"iteration": it, "min_tau": min(taus) if taus else 0,
                          "taus": tuple(taus), "power": float(self.P.sum())})
            if converged:
                break
        return self.finish(it, converged), trace

    def finish(self, it, converged):
        s = self.s
        targets = self.targets()
        feasible, P = check_sa_feasible(s, self.A, targets, self.assoc, self.downlink,
                                        self.caps if self.downlink else None)
        if feasible:
            self.P = P
        tau = np.zeros(s.n_bs, dtype=int)
        mod = np.zeros(s.n_bs, dtype=int)
        for k in self.femtos:
            mod[k], tau[k] = self.s_tau(k)
        obj, rates = plan_objective(s, self.A, self.P, targets, self.assoc, mod, self.downlink)
        return SubchannelPlan(self.A.copy(), self.P.copy(), tau, mod, self.assoc.copy(),
                              bool(feasible), obj, it, converged, rates)


def plan_objective(s, A, P, targets, assoc, modulation, downlink=False):
    """
    Sum over femtocells of the minimum FUE spectral efficiency.

    A subchannel counts only when its SINR reaches the target.

    Returns
    -------
    objective : float
    rates : dict
        Per-femtocell array of FUE spectral efficiencies.
    """
    N = A.shape[1]
    I = link_interference(s, A, P, assoc, downlink)
    with np.errstate(divide="ignore", invalid="ignore"):
        sinr = np.where(A > 0, P / I, 0.0)
    ok = (A > 0) & (sinr >= np.asarray(targets)[:, None] * (1.0 - RATE_RTOL))
    total = 0.0
    rates = {}
    for k in range(1, s.n_bs):
        users = s.users_of(k)
        if users.size == 0:
            continue
        r = ok[users].sum(axis=1) * spectral_efficiency(int(modulation[k]), N) if modulation[k] else np.zeros(users.size)
        rates[k] = r
        total += float(r.min())
    return total, rates


def _fixed_lists(s, s_f, N):
    return {k: [(s_f, t) for t in range(N // max(1, s.users_of(k).size), -1, -1)] for k in range(1, s.n_bs)}


def distributed_uplink_alloc(s, a1, params=None):
    """
    Fixed-rate distributed uplink allocation.

    Each femtocell matches ``tau_k`` virtual copies of its FUEs to subchannels
    by minimum weight, dropping ``tau_k`` when the matched weight exceeds
    ``V`` times the cell budget; MUE protection is enforced by doubling the
    weight of the FUE that interferes most with a power-limited MUE.

    Parameters
    ----------
    s : Scenario
    a1 : ndarray
        ``(n_mue, N)`` macro assignment.
    params : OfdmaParams, optional

    Returns
    -------
    plan : SubchannelPlan
    trace : list of dict
    """
    s = as_multicarrier(s)
    params = params or OfdmaParams()
    N = _n_sub(s)
    mu = params.mu if params.mu is not None else N
    eng = _Allocator(s, a1, params, _fixed_lists(s, params.s_f, N), mu, reset_theta=False)
    return eng.run()


def adaptive_rate_alloc(s, a1, params=None):
    """
    Adaptive-rate allocation: each femtocell walks down its sorted ``(s, tau)`` list.

    Returns
    -------
    plan : SubchannelPlan
    choices : dict
        ``{cell: (s_k, tau_k)}``.
    """
    s = as_multicarrier(s)
    params = params or OfdmaParams()
    N = _n_sub(s)
    lists = {k: theta_list(max(1, s.users_of(k).size), N, params.modulations) for k in range(1, s.n_bs)}
    mu = params.mu if params.mu is not None else 2.0
    eng = _Allocator(s, a1, params, lists, mu, reset_theta=True)
    plan, _ = eng.run()
    return plan, {k: eng.s_tau(k) for k in eng.femtos}


def hybrid_access_alloc(s, a1, params=None):
    """
    Adaptive-rate allocation where macro MUEs may move to a femtocell whose unused
    subchannels cover theirs and which needs less power for them.

    At most one (FBS, MUE) pair is admitted per iteration; hosted MUEs return
    to the macro BS when their host steps down its list.  Closed access is the
    special case where every admission is declined, so with
    ``params.hybrid_fallback`` the closed-access plan is returned (flagged
    ``fallback``) whenever it scores higher.

    Returns
    -------
    plan : SubchannelPlan
    association : ndarray of int
    """
    s = as_multicarrier(s)
    params = params or OfdmaParams()
    N = _n_sub(s)
    lists = {k: theta_list(max(1, s.users_of(k).size), N, params.modulations) for k in range(1, s.n_bs)}
    mu = params.mu if params.mu is not None else 2.0
    eng = _Allocator(s, a1, params, lists, mu, reset_theta=True, hybrid=True)
    plan, _ = eng.run()
    if params.hybrid_fallback:
        closed, _ = adaptive_rate_alloc(s, a1, params)
        if closed.objective > plan.objective or (closed.feasible and not plan.feasible):
            closed.fallback = True
            plan = closed
    return plan, plan.association


def downlink_alloc(s, a1, params):
    """
    Fixed-rate downlink allocation with per-BS budgets ``params.bs_caps``.

    Returns
    -------
    SubchannelPlan
    """
    s = as_multicarrier(s)
    N = _n_sub(s)
    mu = params.mu if params.mu is not None else N
    eng = _Allocator(s, a1, params, _fixed_lists(s, params.s_f, N), mu, reset_theta=False, downlink=True)
    plan, _ = eng.run()
    return plan


# -- exhaustive oracle -------------------------------------------------------

def enumeration_count(n_sub, cell_sizes):
    """Number of equal-share assignments over all femtocells."""
    total = 1
    for m in cell_sizes:
        if m == 0:
            continue
        total *= sum(math.factorial(n_sub) // (math.factorial(t) ** m * math.factorial(n_sub - m * t))
                     for t in range(n_sub // m + 1))
    return total


def _cell_assignments(m, n_sub, tau):
    """All ordered tuples of `m` disjoint `tau`-subsets of range(n_sub)."""
    def rec(i, free):
        if i == m:
            yield ()
            return
        for c in itertools.combinations(free, tau):
            rest = tuple(x for x in free if x not in c)
            for tail in rec(i + 1, rest):
                yield (c,) + tail
    return rec(0, tuple(range(n_sub)))


def exhaustive_optimal(s, a1, params=None, guard=ENUM_GUARD):
    """
    Optimal fixed-rate allocation by enumeration in decreasing total share.

    Returns
    -------
    plan : SubchannelPlan
    objective : float
    """
    s = as_multicarrier(s)
    params = params or OfdmaParams()
    N = _n_sub(s)
    femtos = list(range(1, s.n_bs))
    members = {k: s.users_of(k) for k in femtos}
    sizes = [members[k].size for k in femtos]
    count = enumeration_count(N, sizes)
    if count > guard:
        raise ValueError(f"{count} candidate assignments exceed the guard {guard}")
    targets = np.full(s.n_users, params.gamma(params.s_m))
    for k in femtos:
        targets[members[k]] = params.gamma(params.s_f)
    base = np.zeros((s.n_users, N), dtype=np.int8)
    base[s.mues] = np.asarray(a1, dtype=np.int8)
    active = [k for k in femtos if members[k].size]
    tops = [N // members[k].size for k in active]
    combos = sorted(itertools.product(*[range(t + 1) for t in tops]), key=lambda c: (-sum(c), [-x for x in c]))
    mod = np.zeros(s.n_bs, dtype=int)
    mod[active] = params.s_f
    for taus in combos:
        per_cell = [list(_cell_assignments(members[k].size, N, t)) for k, t in zip(active, taus)]
        for choice in itertools.product(*per_cell):
            A = base.copy()
            for k, sets in zip(active, choice):
                for i, sub in zip(members[k], sets):
                    A[i, list(sub)] = 1
            ok, P = check_sa_feasible(s, A, targets)
            if ok:
                tau = np.zeros(s.n_bs, dtype=int)
                tau[active] = taus
                obj, rates = plan_objective(s, A, P, targets, s.home, mod)
                plan = SubchannelPlan(A, P, tau, mod, s.home.copy(), True, obj, 0, True, rates)
                return plan, obj
    raise RuntimeError("macro assignment alone is infeasible")
