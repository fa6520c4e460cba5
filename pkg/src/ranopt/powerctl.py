"""
Joint base-station association and power control for CDMA-style HetNets.

Power update functions (target tracking, opportunistic and hybrid), the
synchronous minimum-effective-interference association iteration, supported
user classification and the two-time-scale adaptation of the hybrid weights.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels


TPC, OPC, HPC = 0, 1, 2
KINDS = {"tpc": TPC, "opc": OPC, "hpc": HPC}
SUPPORT_RTOL = 1e-9
ALPHA_FLOOR = 1e-12
ALPHA_DATA = 1e6


def opc_scale(p_max, target, x):
    """Opportunistic scale ``xi`` that makes the hybrid update hit `p_max` at the threshold interference."""
    with np.errstate(divide="ignore"):
        return (p_max / target ** x) ** (1.0 / (1.0 - x))


@dataclass
class PufParams:
    """
    Per-user power update parameters.

    Attributes
    ----------
    kind : ndarray of int
        ``TPC``, ``OPC`` or ``HPC`` per user.
    alpha : ndarray
        Hybrid weight (0 gives target tracking, large values approach OPC).
    xi : ndarray
        Opportunistic scale.
    x_exponent : ndarray
        Opportunistic exponent in ``(0, 1/2]``.
    target : ndarray
        Target SINR per user.
    p_max : ndarray
        Power budget per user (W).
    """
    kind: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    x_exponent: np.ndarray
    target: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        n = np.size(self.target)
        self.kind = np.broadcast_to(np.asarray(self.kind, dtype=np.int64), (n,)).copy()
        for name in ("alpha", "xi", "x_exponent", "target", "p_max"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy())
        if np.any(self.target <= 0) or np.any(self.p_max <= 0) or np.any(self.xi <= 0):
            raise ValueError("target, p_max and xi must be positive")
        if np.any(self.alpha < 0):
            raise ValueError("alpha must be non-negative")
        if np.any((self.x_exponent <= 0) | (self.x_exponent >= 1)):
            raise ValueError("x_exponent must lie in (0, 1)")

    @classmethod
    def build(cls, kind, target, p_max, x=0.5, alpha=0.0, xi=None):
        """Parameters with ``xi`` derived from the budget and target when not given."""
        if isinstance(kind, str):
            kind = KINDS[kind.lower()]
        target = np.asarray(target, dtype=float)
        p_max = np.broadcast_to(np.asarray(p_max, dtype=float), target.shape)
        x = np.broadcast_to(np.asarray(x, dtype=float), target.shape)
        if xi is None:
            xi = opc_scale(p_max, target, x)
        return cls(kind, alpha, xi, x, target, p_max)

    @property
    def threshold(self):
        """Largest effective interference at which the target is still reachable."""
        return self.p_max / self.target

    @property
    def n_users(self):
        return self.target.size

    def with_targets(self, target):
        """Copy with new targets; ``xi`` is re-derived so thresholds stay consistent."""
        target = np.asarray(target, dtype=float)
        return replace(self, target=target, xi=opc_scale(self.p_max, target, self.x_exponent))


@dataclass
class PowerState:
    """Powers, association and iteration count of a BSA/PC run."""
    powers: np.ndarray
    association: np.ndarray
    iteration: int = 0
    converged: bool = True


@dataclass
class AdaptationState:
    """Book-keeping of the hybrid-weight adaptation."""
    supported: np.ndarray
    nonsupported: np.ndarray
    best_count: int
    best_alpha: np.ndarray
    scaling: float
    inner_cap: object
    outer_iterations: int = 0
    terminated: str = ""


def interference_matrix(gains, noise, pgain, p):
    """Effective interference of every user at every BS, shape ``(n_bs, n_users)``."""
    total = gains @ p + noise
    return (total[:, None] - gains * p[None, :]) / (pgain * gains)


def effective_interference(s, st, user, bs):
    """
    Interference plus noise at `bs` seen by `user`, normalised by its processing-gain-scaled direct gain.

    Parameters
    ----------
    s : Scenario
    st : PowerState
    user, bs : int

    Returns
    -------
    float
    """
    if not 0 <= user < s.n_users or not 0 <= bs < s.n_bs:
        raise IndexError(f"unknown user {user} or BS {bs}")
    h = s.gains[bs]
    p = np.asarray(st.powers, dtype=float)
    other = h @ p - h[user] * p[user]
    return float((other + s.noise[bs]) / (s.processing_gain * h[user]))


def puf_apply(params, r, users=None):
    """
    Power update response to effective interference `r`.

    Parameters
    ----------
    params : PufParams
    r : float or ndarray
        Effective interference per user (all users, or those in `users`).
    users : array_like of int, optional
        Subset of users that `r` refers to.

    Returns
    -------
    ndarray
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("effective interference must be positive")
    idx = slice(None) if users is None else np.asarray(users)
    p = params
    tpc = p.target[idx] * r
    opc = p.xi[idx] * r ** (p.x_exponent[idx] / (p.x_exponent[idx] - 1.0))
    a = p.alpha[idx]
    hyb = (a * opc + tpc) / (a + 1.0)
    k = p.kind[idx]
    out = np.where(k == TPC, tpc, np.where(k == OPC, opc, hyb))
    return np.minimum(p.p_max[idx], out)


def candidate_mask(s, mue_any_bs=True):
    """
    Boolean ``(n_bs, n_users)`` mask of admissible BSs.

    FUEs only use their own FBS; MUEs may use any BS when `mue_any_bs`.
    """
    mask = np.zeros((s.n_bs, s.n_users), dtype=bool)
    mask[s.home, np.arange(s.n_users)] = True
    if mue_any_bs:
        mask[:, s.mues] = True
    return mask


def _as_mask(s, candidates):
    if candidates is None:
        return candidate_mask(s)
    if isinstance(candidates, np.ndarray) and candidates.shape == (s.n_bs, s.n_users):
        mask = candidates.astype(bool)
    else:
        mask = np.zeros((s.n_bs, s.n_users), dtype=bool)
        for i, ds in enumerate(candidates):
            mask[list(ds), i] = True
    if not mask.any(axis=0).all():
        raise ValueError("every user needs a non-empty candidate set")
    return mask


def bsa_pc_iterate(s, params, candidates=None, tol=1e-8, max_iter=10_000, p0=None):
    """
    Minimum-effective-interference association with synchronous power updates.

    Each step every user picks the admissible BS with the smallest effective
    interference (lowest id on ties) and applies its power update.

    Parameters
    ----------
    s : Scenario
    params : PufParams
    candidates : ndarray of bool or list of sets, optional
        Admissible BSs per user; defaults to :func:`candidate_mask`.
    tol : float
        Stop when the largest power change is at most `tol`.
    max_iter : int
    p0 : array_like, optional
        Initial powers (zeros by default).

    Returns
    -------
    PowerState
        ``converged`` is False when `max_iter` ran out.
    """
    mask = _as_mask(s, candidates)
    gains = np.ascontiguousarray(s.gains, dtype=float)
    if gains.ndim != 2:
        raise ValueError("power control needs a (bs, users) gain matrix")
    p0 = np.zeros(s.n_users) if p0 is None else np.asarray(p0, dtype=float)
    p, assoc, n, ok = kernels.bsa_pc_loop(
        gains, np.ascontiguousarray(s.noise, dtype=float), float(s.processing_gain),
        np.ascontiguousarray(mask, dtype=np.uint8), params.kind, params.alpha, params.xi,
        params.x_exponent, params.target, params.p_max, np.ascontiguousarray(p0), float(tol), int(max_iter))
    return PowerState(np.asarray(p), np.asarray(assoc, dtype=np.int64), int(n), bool(ok))


def serving_interference(s, st):
    """Effective interference of every user at its associated BS."""
    r = interference_matrix(s.gains, s.noise, s.processing_gain, np.asarray(st.powers))
    return r[st.association, np.arange(s.n_users)]


def sinr(s, st):
    """SINR of every user at its associated BS (power over effective interference)."""
    return np.asarray(st.powers) / serving_interference(s, st)


def classify_supported(st, params, s, rtol=SUPPORT_RTOL):
    """
    Split users into supported (interference at or below threshold) and the rest.

    Returns
    -------
    supported, nonsupported : ndarray of int
    """
    r = serving_interference(s, st)
    ok = r <= params.threshold * (1.0 + rtol)
    return np.nonzero(ok)[0], np.nonzero(~ok)[0]


def _alpha_for_power(p_exp, r, params, users):
    """Hybrid weight that makes the update return `p_exp`; ``inf`` when the OPC term is not above it."""
    tpc = params.target[users] * r
    opc = params.xi[users] * r ** (params.x_exponent[users] / (params.x_exponent[users] - 1.0))
    den = opc - p_exp
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(den > 0, (p_exp - tpc) / den, np.inf)
    return g


def updating_process(s, st, params, supported, scaling):
    """
    One local/global update of the hybrid weights.

    Parameters
    ----------
    s : Scenario
    st : PowerState
        Equilibrium of the current weights.
    params : PufParams
    supported : ndarray of bool
        Support flag per user.
    scaling : float
        Global reduction factor applied on warnings.

    Returns
    -------
    alpha : ndarray
        New weights.
    warnings : ndarray of bool
        Cells that broadcast a warning.
    """
    alpha = params.alpha.copy()
    cur = params.alpha
    r = serving_interference(s, st)
    p = np.asarray(st.powers)
    cells = np.unique(st.association)
    warn = {}
    for k in cells:
        members = np.nonzero(st.association == k)[0]
        sup = members[supported[members]]
        if (~supported[members]).any():
            warn[k] = bool(np.all(cur[sup] == 0))
    n_warn = sum(warn.values())
    for k in cells:
        members = np.nonzero(st.association == k)[0]
        sup = members[supported[members]]
        non = members[~supported[members]]
        warned = n_warn - int(warn.get(k, False)) > 0
        if sup.size == 0:
            continue
        if non.size:
            beta = np.max((r[non] - params.threshold[non]) / r[non])
            p_exp = np.maximum(p[sup] * (1.0 - beta), r[sup] * params.target[sup])
            g = np.clip(_alpha_for_power(p_exp, r[sup], params, sup), 0.0, cur[sup])
            # the weight of a potential user must strictly decrease
            g = np.where((g >= cur[sup]) & (cur[sup] > 0), cur[sup] / scaling, g)
            alpha[sup] = g / scaling if warned else g
        elif warned:
            alpha[sup] = cur[sup] / scaling
    alpha[alpha < ALPHA_FLOOR] = 0.0
    warnings = np.zeros(s.n_bs, dtype=bool)
    for k, w in warn.items():
        warnings[k] = w
    return alpha, warnings


def hpc_adaptation(s, init, scaling=16.0, inner_cap=5, tol=1e-12, candidates=None,
                   max_outer=500, final_max_iter=100_000):
    """
    Two-time-scale adaptation of the hybrid weights.

    The inner loop runs the hybrid update for at most `inner_cap` steps
    (``None`` runs it to convergence) starting from the previous powers; the
    outer loop records the best supported count and lowers the weights of
    supported data users to help the others.  On termination the best weights
    are reloaded and the iteration is run to convergence.

    Parameters
    ----------
    s : Scenario
    init : PufParams
        Voice users carry ``alpha=0``, data users a large ``alpha``.
    scaling : float
        Reduction factor (> 1) applied on warnings.
    inner_cap : int or None
    tol : float
    candidates : optional
        Admissible BSs per user.
    max_outer : int

    Returns
    -------
    state : PowerState
    adapt : AdaptationState
    trace : list of dict
        One record per outer iteration with ``alpha``, ``powers``,
        ``association`` and ``n_supported``.
    """
    if scaling <= 1:
        raise ValueError("scaling must exceed 1")
    mask = _as_mask(s, candidates)
    params = replace(init, kind=np.full(init.n_users, HPC), alpha=init.alpha.copy())
    p = np.zeros(s.n_users)
    best_count, best_alpha = -1, params.alpha.copy()
    trace = []
    reason = "outer cap"
    cap = final_max_iter if inner_cap is None else int(inner_cap)
    sup = non = np.zeros(0, dtype=int)
    l = 0
    for l in range(1, max_outer + 1):
        st = bsa_pc_iterate(s, params, mask, tol, cap, p0=p)
        p = st.powers
        sup, non = classify_supported(st, params, s)
        trace.append({"alpha": params.alpha.copy(), "powers": p.copy(),
                      "association": st.association.copy(), "n_supported": int(sup.size)})
        if sup.size > best_count:
            best_count, best_alpha = int(sup.size), params.alpha.copy()
        if sup.size == 0 or non.size == 0:
            reason = "all supported" if non.size == 0 else "none supported"
            break
        flags = np.zeros(s.n_users, dtype=bool)
        flags[sup] = True
        alpha, _ = updating_process(s, st, params, flags, scaling)
        if np.array_equal(alpha, params.alpha):
            reason = "no update"
            break
        params = replace(params, alpha=alpha)
    final = replace(params, alpha=best_alpha)
    st = bsa_pc_iterate(s, final, mask, tol, final_max_iter, p0=p)
    sup, non = classify_supported(st, final, s)
    adapt = AdaptationState(sup, non, best_count, best_alpha, scaling, inner_cap, l, reason)
    return st, adapt, trace


def hybrid_access_targets(s, params, users, low, high, **kw):
    """
    Two-phase target schedule for femto users.

    Phase one adapts with the low target for `users`.  Those that reach it
    then switch to the high target (``xi`` and thresholds rebuilt) and the
    adaptation is rerun; users that failed keep the low target.

    Parameters
    ----------
    s : Scenario
    params : PufParams
    users : array_like of int
    low, high : float
        Targets with ``low < high``.
    **kw
        Passed to :func:`hpc_adaptation`.

    Returns
    -------
    list of dict
        One record per executed phase with ``targets``, ``state``,
        ``adaptation`` and ``upgraded`` (users moved to the high target).
    """
    if not low < high:
        raise ValueError("low target must be below high target")
    users = np.asarray(users, dtype=int)
    t1 = params.target.copy()
    t1[users] = low
    p1 = params.with_targets(t1)
    st, ad, _ = hpc_adaptation(s, p1, **kw)
    phases = [{"targets": t1, "state": st, "adaptation": ad, "upgraded": np.zeros(0, dtype=int)}]
    ok = np.intersect1d(users, ad.supported)
    if ok.size == 0:
        return phases
    t2 = t1.copy()
    t2[ok] = high
    st2, ad2, _ = hpc_adaptation(s, params.with_targets(t2), **kw)
    phases.append({"targets": t2, "state": st2, "adaptation": ad2, "upgraded": ok})
    return phases
