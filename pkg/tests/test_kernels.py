import importlib
import sys

import numpy as np
import pytest

from ranopt import _kernels_py as pure
from ranopt import cranvirt as cv
from ranopt import kernels
from ranopt.scenario import ScenarioConfig

compiled = pytest.importorskip("ranopt._kernels", reason="compiled extension not built")

MODEL = cv.ComplexityModel()


def test_fallback_selected_without_extension(monkeypatch):
    import ranopt
    monkeypatch.setitem(sys.modules, "ranopt._kernels", None)
    monkeypatch.delattr(ranopt, "_kernels", raising=False)
    try:
        mod = importlib.reload(kernels)
        assert mod.BACKEND == "python"
        assert mod.hungarian is pure.hungarian
    finally:
        monkeypatch.undo()
        importlib.reload(kernels)
    assert kernels.BACKEND == "compiled"


@pytest.mark.parametrize("shape", [(1, 1), (3, 3), (4, 7), (6, 6)])
def test_hungarian_parity(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(20):
        # small integer costs create ties, which exercise the tie-break
        cost = np.ascontiguousarray(rng.integers(0, 4, size=shape).astype(float))
        np.testing.assert_array_equal(compiled.hungarian(cost), pure.hungarian(cost))


def _power_problem(seed, n_bs=3, n_users=8):
    rng = np.random.default_rng(seed)
    gains = np.ascontiguousarray(rng.uniform(1e-8, 1e-5, size=(n_bs, n_users)))
    noise = np.full(n_bs, 1e-13)
    cand = np.ascontiguousarray((rng.random((n_bs, n_users)) < 0.6).astype(np.uint8))
    cand[0] = 1
    kind = rng.integers(0, 3, size=n_users).astype(np.int64)
    alpha = rng.choice([0.0, 1.0, 1e6], size=n_users)
    xexp = np.full(n_users, 0.5)
    target = rng.uniform(1, 20, size=n_users)
    pmax = np.full(n_users, 0.01)
    xi = (pmax / target ** xexp) ** (1 / (1 - xexp))
    return gains, noise, 64.0, cand, kind, alpha, xi, xexp, target, pmax


@pytest.mark.parametrize("seed", range(5))
def test_power_loop_parity(seed):
    args = _power_problem(seed)
    p0 = np.zeros(args[0].shape[1])
    a = compiled.bsa_pc_loop(*args, p0, 1e-12, 5000)
    b = pure.bsa_pc_loop(*args, p0, 1e-12, 5000)
    np.testing.assert_allclose(np.asarray(a[0]), np.asarray(b[0]), rtol=1e-12, atol=1e-18)
    np.testing.assert_array_equal(np.asarray(a[1]), np.asarray(b[1]))
    assert a[2] == b[2] and a[3] == b[3]


def test_scalar_helpers_parity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d, i = 10 ** rng.uniform(-2, 3), 1.0
        y, bits = d + i, rng.uniform(1, 12)
        assert compiled.capacity(d, i, y, bits) == pytest.approx(pure.capacity(d, i, y, bits), rel=1e-13)
        assert compiled.capacity_slope(d, i, y, bits) == pytest.approx(pure.capacity_slope(d, i, y, bits),
                                                                       rel=1e-12)
        t = compiled.capacity(d, i, y, bits)
        r = rng.uniform(0.05, 0.95) * t
        assert compiled.capacity_inverse(d, i, y, r) == pytest.approx(pure.capacity_inverse(d, i, y, r),
                                                                      rel=1e-12)
        assert compiled.complexity(r, t, MODEL.A, MODEL.B) == pytest.approx(
            pure.complexity(r, t, MODEL.A, MODEL.B), rel=1e-13)
        lam = 10 ** rng.uniform(-3, 2)
        assert compiled.best_rate(lam, t, MODEL.A, MODEL.B, 0.1, 4.2) == pytest.approx(
            pure.best_rate(lam, t, MODEL.A, MODEL.B, 0.1, 4.2), abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_lagrangian_parity(seed):
    sc = cv.cran_scenario(ScenarioConfig(layout="hexgrid", prbs_per_cell=6, fading=True, seed=seed),
                          counts=[2, 2, 2])
    prob = cv._OpProblem(sc, 1, MODEL)
    masks = prob.masks()
    budgets = np.ascontiguousarray(prob.floor_bits(2.0) / 1.0)
    for lam in (cv.LAM_FLOOR, 0.05, 0.5, 5.0):
        args = (lam, prob.D, prob.I, prob.Y, prob.cell, sc.n_cells, prob.floors, *masks, budgets,
                MODEL.A, MODEL.B, sc.rmin, sc.rmax, 1e-12)
        a, b = compiled.rll_lagrangian(*args), pure.rll_lagrangian(*args)
        np.testing.assert_allclose(np.asarray(a[0]), np.asarray(b[0]), rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(np.asarray(a[1]), np.asarray(b[1]), rtol=1e-7, atol=1e-9)
        assert a[3] == pytest.approx(b[3], rel=1e-7)
        assert a[4] == b[4]
