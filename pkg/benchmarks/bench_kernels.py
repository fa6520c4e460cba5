"""
Compiled versus pure-Python kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N wall time per call for each kernel and backend and
the speed-up of the compiled one.  Inputs are identical across backends.
"""
import argparse
import sys
import timeit

import numpy as np

from ranopt import _kernels_py as pure
from ranopt import cranvirt as cv
from ranopt.scenario import ScenarioConfig

try:
    from ranopt import _kernels as compiled
except ImportError:
    compiled = None


def hungarian_case(n=40, seed=0):
    cost = np.ascontiguousarray(np.random.default_rng(seed).random((n, n)))
    return "hungarian", lambda k: k.hungarian(cost)


def power_case(n_bs=5, n_users=20, seed=0):
    rng = np.random.default_rng(seed)
    gains = np.ascontiguousarray(rng.uniform(1e-8, 1e-5, size=(n_bs, n_users)))
    noise = np.full(n_bs, 1e-13)
    cand = np.ones((n_bs, n_users), dtype=np.uint8)
    kind = np.full(n_users, 2, dtype=np.int64)
    alpha = rng.choice([0.0, 1e6], size=n_users)
    xexp = np.full(n_users, 0.5)
    target = np.full(n_users, 5.0)
    pmax = np.full(n_users, 0.01)
    xi = pmax ** 2 / target
    p0 = np.zeros(n_users)
    args = (gains, noise, 128.0, cand, kind, alpha, xi, xexp, target, pmax, p0, 1e-12, 5000)
    return "bsa_pc_loop", lambda k: k.bsa_pc_loop(*args)


def lagrangian_case(seed=0):
    model = cv.ComplexityModel()
    sc = cv.cran_scenario(ScenarioConfig(layout="hexgrid", prbs_per_cell=9, fading=True, seed=seed),
                          counts=[3, 3, 3])
    prob = cv._OpProblem(sc, 0, model)
    budgets = np.ascontiguousarray(prob.floor_bits(2.0))
    args = (0.5, prob.D, prob.I, prob.Y, prob.cell, sc.n_cells, prob.floors, *prob.masks(), budgets,
            model.A, model.B, sc.rmin, sc.rmax, 1e-12)
    return "rll_lagrangian", lambda k: k.rll_lagrangian(*args)


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the pure backend is timed")
    print(f"{'kernel':<16}{'pure (ms)':>12}{'compiled (ms)':>16}{'speed-up':>10}")
    for name, call in (hungarian_case(), power_case(), lagrangian_case()):
        t_pure = best_time(lambda: call(pure), args.repeat)
        if compiled is None:
            print(f"{name:<16}{t_pure * 1e3:>12.3f}{'-':>16}{'-':>10}")
            continue
        t_comp = best_time(lambda: call(compiled), args.repeat)
        print(f"{name:<16}{t_pure * 1e3:>12.3f}{t_comp * 1e3:>16.3f}{t_pure / t_comp:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
