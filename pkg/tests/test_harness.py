import math

import numpy as np
import pytest

from ranopt import harness
from ranopt.harness import (COLUMNS, ExperimentError, ExperimentReport, ExperimentSpec, emit_csv, read_csv,
                            run_experiment, worker_count)

SMALL3 = dict(n_mue=4, n_femto=2)


def _same_rows(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x[:3] == y[:3]
        assert x[3] == y[3] or (math.isnan(x[3]) and math.isnan(y[3]))


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec("ch5", "target", [1.0])
    with pytest.raises(ValueError):
        ExperimentSpec("ch3", "target", [])
    with pytest.raises(ValueError):
        ExperimentSpec("ch3", "target", [1.0], seeds=[1, 1])
    with pytest.raises(ValueError):
        ExperimentSpec("ch3", "nonsense", [1.0])
    with pytest.raises(ValueError):
        ExperimentSpec("ch3", "target", [1.0], scenario={"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentSpec("ch3", "target", [1.0], params={"method": "ir"})
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"chapter": "ch3", "sweep": "target", "values": [1], "extra": 0})


def test_default_twenty_seeds():
    assert ExperimentSpec("ch3", "target", [1.0]).seeds == list(range(20))


def test_point_routes_sweep_value():
    spec = ExperimentSpec("ch4", "p_max_fue", [0.05], params={"mode": "adaptive"})
    cfg, params = spec.point(0.05, 3)
    assert cfg.p_max_fue == 0.05 and cfg.seed == 3 and params["mode"] == "adaptive"
    spec = ExperimentSpec("ch3", "target", [7.0])
    cfg, params = spec.point(7.0, 1)
    assert params["target"] == 7.0


def test_single_point_single_row_per_metric():
    rep = run_experiment(ExperimentSpec("ch3", "target", [5.0], seeds=[0], scenario=SMALL3))
    names = [r[2] for r in rep.rows]
    assert len(names) == len(set(names)) == len(rep.metrics())
    assert all(r[0] == 5.0 and r[1] == 0 for r in rep.rows)


def test_twenty_seed_mean_is_arithmetic_mean():
    rep = run_experiment(ExperimentSpec("ch3", "target", [5.0], scenario=SMALL3))
    values = [r[3] for r in rep.rows if r[2] == "total_power"]
    assert len(values) == 20
    agg = {m: v for _, m, v in rep.aggregates()}
    assert agg["total_power"] == pytest.approx(sum(values) / 20, rel=1e-15)


def test_rerun_is_identical(tmp_path):
    spec = ExperimentSpec("ch4", "p_max_fue", [0.01, 0.1], seeds=[0, 1])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(run_experiment(spec), a)
    emit_csv(run_experiment(spec), b)
    assert a.read_bytes() == b.read_bytes()


def test_seed_order_does_not_change_rows():
    fwd = run_experiment(ExperimentSpec("ch8", "cloud", [1e7], seeds=[0, 1, 2], scenario={"prbs_per_cell": 3}))
    rev = run_experiment(ExperimentSpec("ch8", "cloud", [1e7], seeds=[2, 0, 1], scenario={"prbs_per_cell": 3}))
    key = lambda r: (r[1], r[2])
    _same_rows(sorted(fwd.rows, key=key), sorted(rev.rows, key=key))


def test_workers_collect_in_order(monkeypatch):
    spec = ExperimentSpec("ch3", "target", [2.0, 10.0], seeds=[3, 1, 2], scenario=SMALL3)
    serial = run_experiment(spec, workers=1)
    monkeypatch.setenv("RANOPT_THREADS", "4")
    assert worker_count() == 4
    _same_rows(serial.rows, run_experiment(spec).rows)
    assert [r[:2] for r in serial.rows[:: len(serial.metrics())]] == [(v, s) for v in (2.0, 10.0)
                                                                       for s in (3, 1, 2)]


def test_bad_thread_count(monkeypatch):
    monkeypatch.setenv("RANOPT_THREADS", "many")
    with pytest.raises(ExperimentError):
        worker_count()
    monkeypatch.setenv("RANOPT_THREADS", "0")
    assert worker_count() == 1


def test_errors_carry_context():
    spec = ExperimentSpec("ch3", "puf", ["bogus"], seeds=[4], scenario=SMALL3)
    with pytest.raises(ExperimentError, match=r"puf='bogus' seed=4"):
        run_experiment(spec)


def test_hpc_never_below_tpc_across_targets():
    targets = [2.0, 5.0, 10.0, 15.0, 20.0]
    seeds = list(range(6))
    res = {}
    for puf in ("tpc", "hpc-adapt"):
        rep = run_experiment(ExperimentSpec("ch3", "target", targets, seeds=seeds, params={"puf": puf}))
        res[puf] = {(r[0], r[1]): r[3] for r in rep.rows if r[2] == "supported"}
    assert res["tpc"].keys() == res["hpc-adapt"].keys()
    assert all(res["hpc-adapt"][k] >= res["tpc"][k] for k in res["tpc"])


def test_csv_round_trip(tmp_path):
    rep = run_experiment(ExperimentSpec("ch8", "method", ["ir", "greedy"], seeds=[0],
                                        scenario={"prbs_per_cell": 3}))
    path = tmp_path / "r.csv"
    emit_csv(rep, path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(COLUMNS)
    _same_rows(read_csv(path).rows, rep.rows)


def test_float_precision_exact(tmp_path):
    vals = [0.1 + 0.2, 1 / 3, 1e-300, np.nextafter(1.0, 2.0), -2.5e17]
    rep = ExperimentReport([(0.3, i, "x", v) for i, v in enumerate(vals)])
    path = tmp_path / "f.csv"
    emit_csv(rep, path)
    assert [r[3] for r in read_csv(path).rows] == vals


def test_empty_report_header_only(tmp_path):
    path = tmp_path / "e.csv"
    emit_csv(ExperimentReport(), path)
    assert path.read_text(encoding="utf-8") == "sweep,seed,metric,value\n"
    assert read_csv(path).rows == []


def test_incomplete_report_detected():
    rep = ExperimentReport([(1, 0, "a", 1.0), (1, 0, "b", 2.0), (1, 1, "a", 3.0)])
    with pytest.raises(ExperimentError):
        rep.check_complete()


def test_ch4_and_ch8_metric_names():
    cfg, params = ExperimentSpec("ch4", "mode", ["fixed"]).point("fixed", 0)
    m = harness.run_ch4(cfg, params)
    assert {"objective", "fairness", "iterations"} <= set(m)
    assert any(k.startswith("min_rate_cell") for k in m)
    cfg, params = ExperimentSpec("ch8", "method", ["ra"], scenario={"prbs_per_cell": 3}).point("ra", 0)
    m, trace = harness.run_ch8(cfg, params, trace=True)
    assert {"sum_rate", "objective", "cloud_op0", "profit_op2"} <= set(m)
    assert len(trace[0]) == 2 + params["n_ops"]
