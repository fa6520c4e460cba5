"""Command-line entry point ``ranopt``."""
import csv
import json
import os
import sys

import click

from . import harness
from .harness import ExperimentReport, ExperimentSpec, emit_csv
from .scenario import ScenarioConfig


def _load_config(path, chapter):
    """Read ``{"scenario": {...}, "params": {...}, "seeds": [...]}`` (all keys optional)."""
    doc = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
    unknown = set(doc) - {"scenario", "params", "seeds"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    scen = dict(harness.SCENARIO_DEFAULTS[chapter])
    scen.update(doc.get("scenario", {}))
    params = harness._merge(harness.PARAM_DEFAULTS[chapter], doc.get("params", {}), chapter)
    seeds = [int(s) for s in doc.get("seeds", [scen.get("seed", 0)])]
    return scen, params, seeds


def _configs(scen, seeds):
    for seed in seeds:
        d = dict(scen)
        d["seed"] = seed
        yield seed, ScenarioConfig.from_dict(d)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([harness._fmt(x) for x in row])


def _report(results):
    rows = []
    for seed, metrics in results:
        rows.extend(("none", seed, k, float(v)) for k, v in metrics.items())
    return ExperimentReport(rows)


def _fail(exc):
    raise click.ClickException(f"{type(exc).__name__}: {exc}")


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Resource allocation for HetNets and virtualized C-RANs."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--puf", type=click.Choice(harness.PUF_CHOICES), default="hpc-adapt", show_default=True)
@click.option("--target", type=float, default=None, help="Target SINR (linear).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Trace CSV.")
def ch3(config_path, puf, target, seed, out):
    """Association and power control; writes the per-iteration trace."""
    try:
        scen, params, seeds = _load_config(config_path, "ch3")
        params["puf"] = puf
        if target is not None:
            params["target"] = target
        seed = seeds[0] if seed is None else seed
        _, cfg = next(_configs(scen, [seed]))
        metrics, rows = harness.run_ch3(cfg, params, trace=True)
        _write_rows(out, ("iteration", "user", "power", "sinr", "bs", "supported"), rows)
    except (ValueError, ArithmeticError, OSError, harness.ExperimentError) as exc:
        _fail(exc)
    click.echo(f"supported {metrics['supported']}/{metrics['n_users']} after {metrics['iterations']} iterations")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--mode", type=click.Choice(harness.CH4_MODES), default="fixed", show_default=True)
@click.option("--qam-f", type=int, default=None, help="FUE constellation size.")
@click.option("--qam-m", type=int, default=None, help="MUE constellation size.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Results CSV.")
def ch4(config_path, mode, qam_f, qam_m, seed, out):
    """OFDMA subchannel and power allocation."""
    try:
        scen, params, seeds = _load_config(config_path, "ch4")
        params["mode"] = mode
        if qam_f is not None:
            params["qam_f"] = qam_f
        if qam_m is not None:
            params["qam_m"] = qam_m
        seeds = seeds if seed is None else [seed]
        results = [(s, harness.run_ch4(cfg, params)) for s, cfg in _configs(scen, seeds)]
        emit_csv(_report(results), out)
    except (ValueError, ArithmeticError, OSError, harness.ExperimentError) as exc:
        _fail(exc)
    click.echo(f"{len(results)} run(s) written to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--method", type=click.Choice(harness.CH8_METHODS), default="ir", show_default=True)
@click.option("--cloud", type=float, default=None, help="Cloud computation limit (bips).")
@click.option("--fronthaul", type=float, default=None, help="Fronthaul limit per cell (bps).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Results CSV.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Upper-level convergence trace CSV (first seed).")
def ch8(config_path, method, cloud, fronthaul, seed, out, trace_path):
    """C-RAN computation and fronthaul slicing."""
    try:
        scen, params, seeds = _load_config(config_path, "ch8")
        params["method"] = method
        if cloud is not None:
            params["cloud"] = cloud
        if fronthaul is not None:
            params["fronthaul"] = fronthaul
        seeds = seeds if seed is None else [seed]
        results, trace_rows = [], None
        for s, cfg in _configs(scen, seeds):
            metrics, rows = harness.run_ch8(cfg, params, trace=True)
            results.append((s, metrics))
            if trace_rows is None:
                trace_rows = rows
        emit_csv(_report(results), out)
        if trace_path:
            n_ops = int(params["n_ops"])
            _write_rows(trace_path, ("iteration", "objective") + tuple(f"rate_op{o}" for o in range(n_ops)),
                        trace_rows or [])
    except (ValueError, ArithmeticError, OSError, harness.ExperimentError) as exc:
        _fail(exc)
    click.echo(f"{len(results)} run(s) written to {out}")


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def sweep(spec_path, out_dir):
    """Monte Carlo sweep; writes results.csv and aggregate.csv into OUT."""
    try:
        spec = ExperimentSpec.load(spec_path)
        report = harness.run_experiment(spec)
        os.makedirs(out_dir, exist_ok=True)
        emit_csv(report, os.path.join(out_dir, "results.csv"))
        _write_rows(os.path.join(out_dir, "aggregate.csv"), ("sweep", "metric", "mean"), report.aggregates())
    except (ValueError, ArithmeticError, OSError, harness.ExperimentError) as exc:
        _fail(exc)
    click.echo(f"{len(report.rows)} rows written to {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
