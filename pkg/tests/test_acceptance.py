"""
Acceptance suite.

Each test evaluates one criterion at its stated tolerance, records a
PASS/FAIL line (printed in the terminal summary) and then asserts.
"""
import json
import math
import time

import numpy as np
import pytest
from click.testing import CliRunner

from ranopt import cranvirt as cv
from ranopt import ofdma as of
from ranopt import powerctl as pc
from ranopt.cli import main
from ranopt.linalg import solve_linear, spectral_radius
from ranopt.scenario import ScenarioConfig, generate_topology


def _hetnet(seed, rng, **kw):
    cfg = dict(seed=seed, n_mue=int(rng.integers(2, 10)), n_femto=int(rng.integers(1, 5)),
               processing_gain=128.0, fading=True, r_macro=300.0, femto_ring=(60.0, 250.0))
    cfg.update(kw)
    return generate_topology(ScenarioConfig(**cfg))


def _mixed(s, rng, target):
    alpha = np.full(s.n_users, pc.ALPHA_DATA)
    alpha[rng.permutation(s.n_users)[: s.n_users // 3]] = 0.0
    return pc.PufParams.build("hpc", np.full(s.n_users, target), 0.01, alpha=alpha)


# -- power control --------------------------------------------------------------

def test_01_two_sided_scalable(verdict):
    kinds = [("tpc", 0.5)] + [(k, x) for k in ("opc", "hpc") for x in (0.1, 0.3, 0.5)]
    rng = np.random.default_rng(1)
    nets = [_hetnet(seed, rng) for seed in range(10)]
    t0 = time.perf_counter()
    bad, total = 0, 0
    for kind, x in kinds:
        for s in nets:
            K, M = 1000, s.n_users
            prm = pc.PufParams.build(kind, rng.uniform(1, 200, M), 0.01, x, rng.uniform(0, 1e6, M))
            mask = pc.candidate_mask(s)
            a = np.exp(rng.uniform(1e-4, np.log(10.0), size=(K, 1)))
            p = 10 ** rng.uniform(-7, -2, size=(K, M))
            q = p * a ** rng.uniform(-1, 1, size=(K, M))

            def f(pw):
                total = pw @ s.gains.T + s.noise                         # (K, BS)
                r = (total[:, :, None] - s.gains[None] * pw[:, None, :]) / (s.processing_gain * s.gains[None])
                return pc.puf_apply(prm, np.where(mask[None], r, np.inf).min(axis=1))

            fp, fq = f(p), f(q)
            bad += int(np.sum(~(np.all(fp / a < fq, axis=1) & np.all(fq < a * fp, axis=1))))
            total += K
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10.0
    verdict(1, ok, f"{total} triples over {len(kinds)} update kinds, {bad} violations, {elapsed:.1f} s")
    assert ok


def test_02_fixed_point_unique(verdict):
    rng = np.random.default_rng(2)
    found, seed, worst, assoc_diff = 0, 0, 0.0, 0
    while found < 100:
        seed += 1
        s = _hetnet(seed, rng, fue_per_femto=(1, 2))
        assert s.n_users <= 20 and s.n_bs <= 5
        target = float(rng.choice([2.0, 5.0, 20.0]))
        tpc = pc.PufParams.build("tpc", np.full(s.n_users, target), 0.01)
        st = pc.bsa_pc_iterate(s, tpc)
        if not st.converged or pc.classify_supported(st, tpc, s)[0].size < s.n_users:
            continue
        found += 1
        for prm in (tpc, _mixed(s, rng, target)):
            a = pc.bsa_pc_iterate(s, prm, tol=1e-13, p0=rng.uniform(0, 0.01, s.n_users))
            b = pc.bsa_pc_iterate(s, prm, tol=1e-13, p0=rng.uniform(0, 0.01, s.n_users))
            assert a.converged and b.converged
            worst = max(worst, float(np.max(np.abs(a.powers - b.powers))))
            assoc_diff += int(np.any(a.association != b.association))
    ok = worst <= 1e-6 and assoc_diff == 0
    verdict(2, ok, f"{found} feasible instances x 2 update kinds, max |dp| {worst:.1e}, "
                   f"{assoc_diff} association mismatches")
    assert ok


def test_03_adaptation_dominates_tpc(verdict):
    fewer, missed, n_feas, n_inf = 0, 0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        s = _hetnet(seed, rng)
        M = s.n_users
        gam = float(rng.choice([5, 20, 60, 120, 200]))
        tpc = pc.PufParams.build("tpc", np.full(M, gam), 0.01)
        n_tpc = pc.classify_supported(pc.bsa_pc_iterate(s, tpc), tpc, s)[0].size
        hpc = _mixed(s, rng, gam)
        st, adapt, _ = pc.hpc_adaptation(s, hpc, inner_cap=None, tol=1e-12)
        fewer += adapt.supported.size < n_tpc
        if n_tpc == M:
            n_feas += 1
            g = pc.sinr(s, st)
            met = np.all(g >= gam * (1 - 1e-6))
            above = np.any(g > gam * (1 + 1e-6))
            missed += not (met and above)
        else:
            n_inf += 1
    ok = fewer == 0 and missed == 0 and n_feas > 0 and n_inf > 0
    verdict(3, ok, f"{n_feas} TPC-feasible and {n_inf} infeasible instances, {fewer} with fewer supported, "
                   f"{missed} feasible without all-met-and-one-above")
    assert ok


# -- OFDMA ----------------------------------------------------------------------

def test_04_pareto_power_oracle(verdict):
    rng = np.random.default_rng(4)
    feas, infeas, worst, late, seed = 0, 0, 0.0, 0, 0
    while feas < 500 or infeas < 100:
        seed += 1
        s = of.as_multicarrier(generate_topology(ScenarioConfig(
            seed=seed, n_mue=2, n_femto=3, fue_per_femto=(1, 2), r_macro=50.0, r_femto=30.0,
            femto_ring=(60.0, 200.0), n_subchannels=1, fading=True)))
        users = [int(rng.choice(s.users_of(b))) for b in range(s.n_bs) if s.users_of(b).size]
        users = rng.permutation(users)[: int(rng.integers(1, 5))]
        A = np.zeros((s.n_users, 1))
        A[users, 0] = 1
        _, gh, g = of.cochannel_system(s, A, 10 ** rng.uniform(0, 2.5, s.n_users), 0, s.home)
        rho = spectral_radius(gh)
        res = of.foschini_miljanic(gh, g)
        if rho < 1 and feas < 500:
            feas += 1
            ref = solve_linear(np.eye(g.size) - gh, g)
            err = float(np.max(np.abs(res.powers - ref) / ref)) if res.converged else math.inf
            worst = max(worst, err)
        elif rho >= 1 and infeas < 100:
            infeas += 1
            late += not (res.diverged and res.iterations <= 200)
    ok = worst <= 1e-8 and late == 0
    verdict(4, ok, f"{feas} feasible subchannels, max relative error {worst:.1e}; "
                   f"{infeas} with spectral radius >= 1, {late} not flagged within 200 iterations")
    assert ok


def _small_ofdma(seed, N):
    return generate_topology(dict(seed=seed, n_mue=2, n_femto=2, fue_per_femto=(1, 2), r_macro=300.0,
                                  r_femto=30.0, femto_ring=(50.0, 210.0), femto_ab=(25.0, 45.0), wall_loss=5.0,
                                  noise=1e-16, n_subchannels=N, fading=True, p_max_fue=0.01))


def test_05_optimality_gap(verdict):
    t0 = time.perf_counter()
    ratios, above, unfair, idle, seed = [], 0, 0, 0, -1
    p = of.OfdmaParams(s_f=4)
    while len(ratios) < 50:
        seed += 1
        N = (2, 3, 4)[seed % 3]
        s = _small_ofdma(seed, N)
        try:
            a1 = of.macro_assignment(s, N, p.gamma(p.s_m), per_mue=1)
        except ValueError:
            continue
        plan, _ = of.distributed_uplink_alloc(s, a1, p)
        _, best = of.exhaustive_optimal(s, a1, p)
        above += plan.objective > best + 1e-12
        ratios.append(plan.objective / best if best > 0 else 1.0)
        for k in s.femto_ids:
            rates = plan.cell_rates[k]
            if not np.any(rates > 0):
                idle += 1                              # the index is undefined for an all-zero cell
                continue
            unfair += abs(of.fairness_index(rates) - 1.0) > 1e-12
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(ratios))
    ok = mean >= 0.95 and above == 0 and unfair == 0 and elapsed < 60
    verdict(5, ok, f"mean ratio {mean:.4f} over {len(ratios)} instances, {above} above optimum, "
                   f"{unfair} cells with fairness != 1 ({idle} idle cells skipped), {elapsed:.1f} s")
    assert ok


def test_06_figure_shapes(verdict):
    pfs = np.logspace(-2, -1, 6)
    curves = []
    for seed in range(20):
        row = []
        for pf in pfs:
            s = generate_topology(dict(seed=seed, n_mue=4, n_femto=3, fue_per_femto=(1, 3), r_macro=50.0,
                                       r_femto=30.0, femto_ring=(100.0, 400.0), femto_ab=(25.0, 45.0),
                                       wall_loss=5.0, noise=1e-13, n_subchannels=8, fading=True, p_max_fue=pf))
            p = of.OfdmaParams(s_f=256)
            try:
                a1 = of.macro_assignment(s, 8, p.gamma(p.s_m))
            except ValueError:
                row = None
                break
            row.append(of.distributed_uplink_alloc(s, a1, p)[0].objective)
        if row:
            curves.append(row)
    mean = np.mean(curves, axis=0)
    steps = np.diff(mean)
    shape_ok = bool(np.all(steps >= -1e-12) and steps[-1] <= 0.5 * steps[0] and steps[0] > 0)

    worse, runs = 0, 0
    for seed in range(100):
        s = generate_topology(dict(seed=seed, n_mue=4, n_femto=3, fue_per_femto=(1, 3), r_macro=200.0,
                                   r_femto=30.0, femto_ring=(50.0, 200.0), femto_ab=(25.0, 45.0), wall_loss=5.0,
                                   noise=1e-13, n_subchannels=8, fading=True, p_max_fue=0.01, p_max_mue=1.0))
        p = of.OfdmaParams(s_m=4)
        try:
            a1 = of.macro_assignment(s, 8, p.gamma(4))
        except ValueError:
            continue
        runs += 1
        closed, _ = of.adaptive_rate_alloc(s, a1, p)
        hybrid, _ = of.hybrid_access_alloc(s, a1, p)
        worse += hybrid.objective < closed.objective - 1e-9
    ok = shape_ok and worse == 0 and runs > 0
    verdict(6, ok, f"P_f sweep mean {np.round(mean, 3).tolist()} over {len(curves)} seeds; "
                   f"hybrid below closed access on {worse}/{runs} seeds")
    assert ok


# -- C-RAN ----------------------------------------------------------------------

def test_07_quantization_bound(verdict):
    rng = np.random.default_rng(7)
    n = 10_000
    gbar = 10 ** rng.uniform(-4, 4, n)
    I = 10 ** rng.uniform(-3, 3, n)
    D = gbar * I
    b = cv.min_quant_bits(D, I) + np.where(rng.random(n) < 0.3, 0.0, rng.uniform(0, 8, n))
    lhs = cv.sinr_with_quant(D, I, b)
    rhs = cv.sinr_lower_bound(gbar)
    bad = int(np.sum(lhs < rhs * (1 - 1e-12)))
    hi = float(cv.sinr_lower_bound(1e4) / math.sqrt(1e4))
    lo = float(cv.sinr_lower_bound(1e-4) / (1e-4 / 2))
    ok = bad == 0 and abs(hi - 1) <= 0.01 and abs(lo - 1) <= 0.01
    verdict(7, ok, f"{n} samples, {bad} below the bound; ratio {hi:.4f} at 1e4 and {lo:.4f} at 1e-4")
    assert ok


def _numeric_hessian(f, r, b, h=1e-4):
    frr = (f(r + h, b) - 2 * f(r, b) + f(r - h, b)) / h ** 2
    fbb = (f(r, b + h) - 2 * f(r, b) + f(r, b - h)) / h ** 2
    frb = (f(r + h, b + h) - f(r + h, b - h) - f(r - h, b + h) + f(r - h, b - h)) / (4 * h * h)
    return np.array([[frr, frb], [frb, fbb]])


@pytest.mark.xfail(strict=True, reason="the complexity function is not jointly convex in (rate, bits)")
def test_08_joint_convexity(verdict):
    model = cv.ComplexityModel(t_prime=0.2, zeta=6.0, eps=0.1)
    rng = np.random.default_rng(8)
    worst, n, viol = math.inf, 0, 0
    while n < 1000:
        gbar = 10 ** rng.uniform(-1, 3)
        D, I = gbar, 1.0
        bmin = float(cv.min_quant_bits(D, I, exact=True))
        b = bmin + rng.uniform(0, 8)
        t = float(cv.capacity(D, I, b))
        r = rng.uniform(0.01, 0.95) * t
        if t - r < 1e-2:
            continue
        n += 1
        f = lambda rr, bb: float(model.per_use(rr, cv.capacity(D, I, bb)))
        ev = np.linalg.eigvalsh(_numeric_hessian(f, r, b))[0]
        worst = min(worst, ev)
        viol += ev < -1e-6
    ok = worst >= -1e-6
    verdict(8, ok, f"{n} points, {viol} with min eigenvalue < -1e-6, worst {worst:.3e}")
    assert ok


def _grid_oracle(sc, model, c_slice, b_slice, h=0.01):
    cells, prbs = sc.prbs_of(0)
    D, I = sc.D[cells, prbs], sc.I[cells, prbs]
    fl = cv.min_quant_bits(D, I)
    budget = np.asarray(b_slice) / (2 * sc.n_re)
    # more bits only lower complexity, so the bits sit on the top grid point
    btop = fl + h * np.floor((budget[cells] - fl) / h + 1e-9)
    rates = np.arange(sc.rmin, sc.rmax + 1e-12, h)
    t = cv.capacity(D, I, btop)
    cost = [np.where(rates < t[i], model.per_use(rates, t[i]), np.inf) for i in range(2)]
    total = cost[0][:, None] + cost[1][None, :]
    return np.where(total <= c_slice / sc.n_re, rates[:, None] + rates[None, :], -np.inf).max()


def test_09_lower_level_grid_oracle(verdict):
    model = cv.ComplexityModel()
    t0 = time.perf_counter()
    errs, seed = [], -1
    while len(errs) < 20:
        seed += 1
        sc = cv.cran_scenario(ScenarioConfig(layout="hexgrid", n_cells=2, prbs_per_cell=2, fading=True, seed=seed),
                              n_ops=2, counts=[1, 1])
        cells, prbs = sc.prbs_of(0)
        D, I = sc.D[cells, prbs], sc.I[cells, prbs]
        fl = cv.min_quant_bits(D, I)
        t = cv.capacity(D, I, fl + 3.0)
        if np.any(t <= sc.rmin):
            continue                                   # an idle PRB has no rate to search over
        b_slice = (fl + 3.0) * 2 * sc.n_re
        c_slice = 0.5 * model.per_use(np.minimum(0.9 * t, sc.rmax), t).sum() * sc.n_re
        try:
            res = cv.solve_rll(sc, 0, c_slice, b_slice)
        except cv.InfeasibleSlice:
            continue
        g = _grid_oracle(sc, model, c_slice, b_slice)
        errs.append(abs(res.rate - g) / g)
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 0.01 and elapsed < 120
    verdict(9, ok, f"{len(errs)} instances, max relative gap {max(errs):.2e}, {elapsed:.1f} s")
    assert ok


def test_10_ordering_chain(verdict):
    model = cv.ComplexityModel()
    broken, ir_sum, ra_sum = 0, 0.0, 0.0
    for seed in range(100):
        S = (3, 6, 9)[seed % 3]
        sc = cv.cran_scenario(ScenarioConfig(layout="hexgrid", prbs_per_cell=S, fading=True, seed=seed),
                              counts=[S // 3] * 3)
        C, B = 3.3e6 * S, 4.4e6 * S
        rul = cv.solve_rul(sc, model, c_cap=C, b_cap=B)
        ir = sum(cv.round_ir(sc, rul.rll[o], rul.c[o], rul.b[o], model).rate for o in range(3))
        ra = sum(cv.round_ra(sc, rul.rll[o], rul.c[o], rul.b[o], model).rate for o in range(3))
        gr = sum(a.rate for a in cv.greedy_alloc(sc, model, C, B))
        top = rul.rates.sum()
        eps = 1e-9
        broken += not (gr <= ra + eps and ra <= top + eps and gr <= ir + eps and ir <= top + eps)
        ir_sum += ir
        ra_sum += ra

    S = 6
    caps = 3.3e6 * S * np.array([0.25, 0.5, 1.0, 2.0, 4.0, 8.0])
    sweep = np.zeros(caps.size)
    for seed in range(10):
        sc = cv.cran_scenario(ScenarioConfig(layout="hexgrid", prbs_per_cell=S, fading=True, seed=seed),
                              counts=[2, 2, 2])
        for k, C in enumerate(caps):
            sweep[k] += cv.solve_rul(sc, model, c_cap=C, b_cap=4.4e6 * S).rates.sum() / 10
    steps = np.diff(sweep)
    shape_ok = bool(np.all(steps >= -1e-6 * sweep[-1]) and steps[-1] <= 0.5 * steps[0] and steps[0] > 0)
    ok = broken == 0 and ir_sum >= ra_sum and shape_ok
    verdict(10, ok, f"chain broken in {broken}/100, mean IR {ir_sum / 100:.4f} vs RA {ra_sum / 100:.4f}; "
                    f"cloud sweep {np.round(sweep, 3).tolist()}")
    assert ok


# -- CLI ------------------------------------------------------------------------

def test_11_cli_determinism(verdict, tmp_path):
    small4 = {"scenario": {"n_subchannels": 4, "fue_per_femto": [1, 2], "n_femto": 2}, "seeds": [3]}
    small8 = {"scenario": {"prbs_per_cell": 3}, "seeds": [1]}
    spec = {"chapter": "ch3", "sweep": "target", "values": [2.0, 10.0], "seeds": [0, 1, 2]}
    files = {}
    for name, doc in (("c4", small4), ("c8", small8), ("spec", spec)):
        files[name] = tmp_path / f"{name}.json"
        files[name].write_text(json.dumps(doc))
    calls = [["ch3", "--puf", puf, "--seed", "4"] for puf in ("tpc", "opc", "hpc", "hpc-adapt")]
    calls += [["ch4", "--config", files["c4"], "--mode", m] for m in ("fixed", "adaptive", "hybrid",
                                                                      "downlink", "optimal")]
    calls += [["ch8", "--config", files["c8"], "--method", m] for m in ("relaxed", "ir", "ra", "greedy")]
    runner = CliRunner()
    differ, failed = [], []
    for k, args in enumerate(calls):
        outs = []
        for rep in range(2):
            out = tmp_path / f"{k}_{rep}.csv"
            res = runner.invoke(main, [str(a) for a in args] + ["--out", str(out)])
            if res.exit_code != 0:
                failed.append(" ".join(map(str, args[:3])))
                break
            outs.append(out.read_bytes())
        if len(outs) == 2 and outs[0] != outs[1]:
            differ.append(" ".join(map(str, args[:3])))
    sweep_outs = []
    for rep in range(2):
        res = runner.invoke(main, ["sweep", "--spec", str(files["spec"]), "--out", str(tmp_path / f"sw{rep}")])
        if res.exit_code != 0:
            failed.append("sweep")
        sweep_outs.append(b"".join((tmp_path / f"sw{rep}" / n).read_bytes() for n in ("results.csv", "aggregate.csv"))
                          if res.exit_code == 0 else b"")
    if sweep_outs[0] != sweep_outs[1]:
        differ.append("sweep")
    ok = not differ and not failed
    verdict(11, ok, f"{len(calls) + 1} invocations run twice, differing {differ}, failing {failed}")
    assert ok
