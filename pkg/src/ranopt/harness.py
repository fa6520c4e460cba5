"""
Experiment orchestration.

An experiment names a chapter runner, one swept parameter with its values
and a list of seeds.  Every (sweep value, seed) pair builds its own network
instance and returns a flat dict of metrics; rows are collected in
(sweep, seed) order whatever order the workers finish in.  The worker count
comes from ``RANOPT_THREADS`` (default 1).
"""
import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import cranvirt, ofdma, powerctl
from .scenario import ScenarioConfig, generate_topology, substream


CHAPTERS = ("ch3", "ch4", "ch8")
COLUMNS = ("sweep", "seed", "metric", "value")
DEFAULT_SEEDS = tuple(range(20))
PUF_CHOICES = ("tpc", "opc", "hpc", "hpc-adapt")
CH4_MODES = ("fixed", "adaptive", "hybrid", "downlink", "optimal")
CH8_METHODS = ("relaxed", "ir", "ra", "greedy")

# desk-scale geometries where the chapter's algorithms face non-trivial loads
SCENARIO_DEFAULTS = {
    "ch3": dict(layout="hetnet", n_mue=10, n_femto=4, fue_per_femto=(1, 3), r_macro=300.0,
                r_femto=50.0, femto_ring=(60.0, 250.0), processing_gain=128.0, fading=True),
    "ch4": dict(layout="hetnet", n_mue=4, n_femto=3, fue_per_femto=(1, 3), r_macro=50.0,
                r_femto=30.0, femto_ring=(100.0, 400.0), femto_ab=(25.0, 45.0), wall_loss=5.0,
                n_subchannels=8, fading=True),
    "ch8": dict(layout="hexgrid", n_cells=7, isd=400.0, user_distance=100.0, prbs_per_cell=9,
                tx_power=0.1, fading=True),
}

PARAM_DEFAULTS = {
    "ch3": dict(puf="hpc-adapt", target=20.0, x=0.5, n_voice=8, alpha0=powerctl.ALPHA_DATA,
                scaling=16.0, inner_cap=5, mue_any_bs=True),
    "ch4": dict(mode="fixed", qam_f=4, qam_m=4, ber=1e-3, V=10.0, max_iter=2000,
                convention="formula", bs_caps=None, hybrid_fallback=True),
    "ch8": dict(method="ir", cloud=None, fronthaul=None, n_ops=3, counts=None, weights=None,
                t_prime=0.2, zeta=6.0, eps=0.1, psi=1e-6, beta=1e-6, rho=5e-6, ups_inp=1.0,
                ups=1.0, max_iter=100, step=0.5),
}


class ExperimentError(RuntimeError):
    """Solver or configuration failure tagged with the (sweep, seed) that raised it."""


def worker_count():
    """Pool size from ``RANOPT_THREADS`` (at least 1)."""
    raw = os.environ.get("RANOPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ExperimentError(f"RANOPT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _merge(defaults, given, what):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class ExperimentSpec:
    """
    Declarative experiment.

    Attributes
    ----------
    chapter : {"ch3", "ch4", "ch8"}
    sweep : str
        Name of a scenario field or chapter parameter.
    values : list
        Sweep values, non-empty.
    seeds : list of int
        Distinct Monte Carlo seeds.
    scenario : dict
        Scenario overrides on top of the chapter defaults.
    params : dict
        Chapter parameter overrides.
    """
    chapter: str
    sweep: str
    values: list
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    scenario: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.chapter not in CHAPTERS:
            raise ValueError(f"chapter must be one of {CHAPTERS}, got {self.chapter!r}")
        self.values = list(self.values)
        self.seeds = [int(s) for s in self.seeds]
        if not self.values:
            raise ValueError("sweep range must be non-empty")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be non-empty and distinct")
        scen_keys = {f.name for f in fields(ScenarioConfig)} - {"seed"}
        bad = set(self.scenario) - scen_keys
        if bad:
            raise ValueError(f"unknown scenario keys: {sorted(bad)}")
        _merge(PARAM_DEFAULTS[self.chapter], self.params, self.chapter)
        if self.sweep not in scen_keys and self.sweep not in PARAM_DEFAULTS[self.chapter]:
            raise ValueError(f"sweep variable {self.sweep!r} is neither a scenario field nor a {self.chapter} parameter")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def point(self, value, seed):
        """Scenario config and parameters of one (sweep value, seed) run."""
        scen = dict(SCENARIO_DEFAULTS[self.chapter])
        scen.update(self.scenario)
        params = _merge(PARAM_DEFAULTS[self.chapter], self.params, self.chapter)
        if self.sweep in params:
            params[self.sweep] = value
        else:
            scen[self.sweep] = value
        scen["seed"] = int(seed)
        return ScenarioConfig.from_dict(scen), params


@dataclass
class ExperimentReport:
    """Rows of ``(sweep, seed, metric, value)`` in deterministic order."""
    rows: list = field(default_factory=list)

    def metrics(self):
        seen = {}
        for r in self.rows:
            seen.setdefault(r[2], None)
        return list(seen)

    def aggregates(self):
        """Arithmetic mean over seeds per ``(sweep, metric)``, in first-seen order."""
        acc = {}
        for sweep, _, metric, value in self.rows:
            acc.setdefault((sweep, metric), []).append(value)
        return [(sweep, metric, float(np.mean(v))) for (sweep, metric), v in acc.items()]

    def check_complete(self):
        """Raise unless every (sweep, seed) pair carries every metric."""
        pairs, names, have = [], self.metrics(), set()
        for sweep, seed, metric, _ in self.rows:
            if (sweep, seed) not in pairs:
                pairs.append((sweep, seed))
            have.add((sweep, seed, metric))
        missing = [(s, d, m) for s, d in pairs for m in names if (s, d, m) not in have]
        if missing:
            raise ExperimentError(f"report incomplete, e.g. {missing[0]}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_csv(report, path):
    """Write the report as UTF-8 CSV with a header and full float precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path):
    """Inverse of :func:`emit_csv` for numeric sweep values and metrics."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected header {header}")
        for sweep, seed, metric, value in r:
            rows.append((_parse(sweep), int(seed), metric, float(value)))
    return ExperimentReport(rows)


def _parse(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


# -- chapter runners ----------------------------------------------------------

def _ch3_params(s, params, rng):
    M = s.n_users
    target = np.full(M, float(params["target"]))
    kind = "hpc" if params["puf"] == "hpc-adapt" else params["puf"]
    alpha = np.zeros(M)
    if kind == "hpc":
        alpha = np.full(M, float(params["alpha0"]))
        alpha[rng.permutation(M)[: min(int(params["n_voice"]), M)]] = 0.0
    return powerctl.PufParams.build(kind, target, s.max_powers, x=float(params["x"]), alpha=alpha)


def run_ch3(config, params, trace=False):
    """
    Association and power control on one HetNet instance.

    ``puf`` selects a plain fixed-point run (``tpc``, ``opc``, ``hpc``) or the
    weight adaptation (``hpc-adapt``).  Voice users (``alpha=0``) are drawn
    from the "roles" substream.

    Returns
    -------
    metrics : dict
    rows : list of tuple, optional
        ``(iteration, user, power, sinr, bs, supported)`` when `trace`.
    """
    if params["puf"] not in PUF_CHOICES:
        raise ValueError(f"puf must be one of {PUF_CHOICES}")
    s = generate_topology(config)
    rng = substream(config.seed, "roles")
    pp = _ch3_params(s, params, rng)
    mask = powerctl.candidate_mask(s, bool(params["mue_any_bs"]))
    steps = []
    if params["puf"] == "hpc-adapt":
        cap = params["inner_cap"]
        st, adapt, tr = powerctl.hpc_adaptation(s, pp, scaling=float(params["scaling"]),
                                                inner_cap=None if cap is None else int(cap), candidates=mask)
        if trace:
            steps = [(rec["powers"], rec["association"]) for rec in tr]
        iterations = adapt.outer_iterations
        pp = replace(pp, kind=np.full(pp.n_users, powerctl.HPC), alpha=adapt.best_alpha)
    elif trace:
        p = np.zeros(s.n_users)
        st = None
        for _ in range(10_000):
            st = powerctl.bsa_pc_iterate(s, pp, mask, max_iter=1, p0=p)
            steps.append((st.powers, st.association))
            done = np.max(np.abs(st.powers - p)) <= 1e-8
            p = st.powers
            if done:
                break
        iterations = len(steps)
    else:
        st = powerctl.bsa_pc_iterate(s, pp, mask)
        iterations = st.iteration
    if trace:
        steps.append((st.powers, st.association))
    sup, _ = powerctl.classify_supported(st, pp, s)
    g = powerctl.sinr(s, st)
    metrics = {
        "n_users": s.n_users,
        "supported": int(sup.size),
        "total_power": float(np.sum(st.powers)),
        "min_sinr": float(g.min()),
        "max_sinr": float(g.max()),
        "iterations": int(iterations),
        "converged": bool(st.converged),
    }
    if not trace:
        return metrics
    rows = []
    for it, (p, a) in enumerate(steps):
        state = powerctl.PowerState(np.asarray(p), np.asarray(a))
        gi = powerctl.sinr(s, state)
        ok = np.zeros(s.n_users, dtype=bool)
        ok[powerctl.classify_supported(state, pp, s)[0]] = True
        for u in range(s.n_users):
            rows.append((it, u, float(p[u]), float(gi[u]), int(a[u]), bool(ok[u])))
    return metrics, rows


def run_ch4(config, params):
    """
    One OFDMA femtocell allocation.

    Returns per-femtocell minimum spectral efficiency, the total objective,
    Jain's index of each femtocell averaged over cells and the iteration count.
    """
    mode = params["mode"]
    if mode not in CH4_MODES:
        raise ValueError(f"mode must be one of {CH4_MODES}")
    s = generate_topology(config)
    caps = params["bs_caps"]
    if mode == "downlink" and caps is None:
        caps = (0.05,) + (float(config.p_max_fue),) * (s.n_bs - 1)
    p = ofdma.OfdmaParams(s_f=int(params["qam_f"]), s_m=int(params["qam_m"]), ber=float(params["ber"]),
                          V=float(params["V"]), max_iter=int(params["max_iter"]), convention=params["convention"],
                          bs_caps=None if caps is None else tuple(caps), hybrid_fallback=bool(params["hybrid_fallback"]))
    N = s.gains.shape[2] if s.gains.ndim == 3 else 1
    a1 = ofdma.macro_assignment(ofdma.as_multicarrier(s), N, p.gamma(p.s_m))
    if mode == "fixed":
        plan, _ = ofdma.distributed_uplink_alloc(s, a1, p)
    elif mode == "adaptive":
        plan, _ = ofdma.adaptive_rate_alloc(s, a1, p)
    elif mode == "hybrid":
        plan, _ = ofdma.hybrid_access_alloc(s, a1, p)
    elif mode == "downlink":
        plan = ofdma.downlink_alloc(s, a1, p)
    else:
        plan, _ = ofdma.exhaustive_optimal(s, a1, p)
    metrics = {}
    fair = []
    for k in sorted(plan.cell_rates):
        r = plan.cell_rates[k]
        metrics[f"min_rate_cell{k}"] = float(r.min())
        if np.any(r > 0):
            fair.append(ofdma.fairness_index(r))
    metrics["objective"] = float(plan.objective)
    # per-femtocell index averaged over cells that carry traffic
    metrics["fairness"] = float(np.mean(fair)) if fair else math.nan
    metrics["iterations"] = int(plan.iterations)
    metrics["feasible"] = bool(plan.feasible)
    return metrics


def _ch8_models(params):
    model = cranvirt.ComplexityModel(t_prime=float(params["t_prime"]), zeta=float(params["zeta"]),
                                     eps=float(params["eps"]))
    econ = cranvirt.EconomicModel(n_ops=int(params["n_ops"]), psi=params["psi"], beta=params["beta"],
                                  rho=params["rho"], ups_inp=float(params["ups_inp"]), ups=params["ups"])
    return model, econ


def run_ch8(config, params, trace=False):
    """
    One C-RAN slicing run.

    ``cloud`` (bips) and ``fronthaul`` (bps per cell) default to 3.3 Mbips
    and 4.4 Mbps per PRB per cell, a regime where both limits bind.

    Returns
    -------
    metrics : dict
    rows : list of tuple, optional
        Upper-level ``(iteration, objective, rate_op0, ...)`` trace when `trace`.
    """
    method = params["method"]
    if method not in CH8_METHODS:
        raise ValueError(f"method must be one of {CH8_METHODS}")
    scen = cranvirt.cran_scenario(config, n_ops=int(params["n_ops"]), weights=params["weights"],
                                  counts=params["counts"])
    S = scen.n_prbs
    cloud = 3.3e6 * S if params["cloud"] is None else float(params["cloud"])
    front = 4.4e6 * S if params["fronthaul"] is None else params["fronthaul"]
    model, econ = _ch8_models(params)
    out = cranvirt.allocate(scen, method, model, econ, cloud, front,
                            **({} if method == "greedy" else dict(max_iter=int(params["max_iter"]),
                                                                   step=float(params["step"]))))
    metrics = {
        "sum_rate": float(out.rates.sum()),
        "throughput_bps": float(out.rates.sum() * scen.n_re),
        "objective": float(out.objective),
        "inp_profit": float(out.g_inp.sum()),
        "iterations": int(out.iterations),
        "feasible": bool(out.feasible),
    }
    for o in range(scen.n_ops):
        metrics[f"cloud_op{o}"] = float(out.c[o])
        metrics[f"fronthaul_op{o}"] = float(np.sum(out.b[o]))
        metrics[f"rate_op{o}"] = float(out.rates[o])
        metrics[f"profit_op{o}"] = float(out.g_op[o])
    if not trace:
        return metrics
    rows = [(n, float(psi), *[float(x) for x in rates]) for n, psi, rates in out.trace]
    return metrics, rows


RUNNERS = {"ch3": run_ch3, "ch4": run_ch4, "ch8": run_ch8}


def _run_point(spec, value, seed):
    try:
        config, params = spec.point(value, seed)
        return RUNNERS[spec.chapter](config, params)
    except Exception as exc:  # propagate with context
        raise ExperimentError(f"{spec.chapter} sweep {spec.sweep}={value!r} seed={seed}: {exc}") from exc


def run_experiment(spec, workers=None):
    """
    Run every (sweep value, seed) pair and collect the metrics.

    Parameters
    ----------
    spec : ExperimentSpec
    workers : int, optional
        Pool size; defaults to :func:`worker_count`.

    Returns
    -------
    ExperimentReport
    """
    jobs = [(v, s) for v in spec.values for s in spec.seeds]
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1:
        results = [_run_point(spec, v, s) for v, s in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_point(spec, *job), jobs))
    rows = []
    for (v, s), metrics in zip(jobs, results):
        rows.extend((v, s, name, float(val)) for name, val in metrics.items())
    report = ExperimentReport(rows)
    report.check_complete()
    return report
