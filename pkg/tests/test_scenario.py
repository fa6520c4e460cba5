import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranopt.scenario import (PathLossModel, Scenario, ScenarioConfig, build_channel_tensor, cran_model,
                             generate_topology, hex_centers, path_loss_gain, substream, wall_counts)


def test_same_seed_same_instance():
    a = generate_topology(ScenarioConfig(seed=7))
    b = generate_topology(ScenarioConfig(seed=7))
    np.testing.assert_array_equal(a.user_positions, b.user_positions)
    np.testing.assert_array_equal(a.gains, b.gains)
    c = generate_topology(ScenarioConfig(seed=8))
    assert not np.array_equal(a.user_positions, c.user_positions)


def test_default_hetnet_counts_and_radii():
    cfg = ScenarioConfig(seed=1, r_macro=1000.0, r_femto=50.0, n_mue=10, n_femto=4, fue_per_femto=(1, 3))
    s = generate_topology(cfg)
    assert s.n_bs == 5 and s.tiers == ["macro"] + ["femto"] * 4
    assert s.mues.size == 10
    for k in s.femto_ids:
        users = s.users_of(k)
        assert 1 <= users.size <= 3
        d = np.linalg.norm(s.user_positions[users] - s.bs_positions[k], axis=1)
        assert np.all(d <= 50.0 + 1e-9)
    d = np.linalg.norm(s.user_positions[s.mues], axis=1)
    assert np.all(d <= 1000.0 + 1e-9)


def test_hexgrid_user_distance():
    s = generate_topology(ScenarioConfig(layout="hexgrid", n_cells=7, isd=400.0, user_distance=120.0,
                                         prbs_per_cell=3, seed=2))
    centers = hex_centers(7, 400.0)
    np.testing.assert_allclose(s.bs_positions, centers)
    d = np.linalg.norm(s.user_positions - centers[s.home], axis=1)
    np.testing.assert_allclose(d, 120.0)
    nearest = np.linalg.norm(centers[1:], axis=1)
    np.testing.assert_allclose(nearest, 400.0)
    assert s.gains.shape == (7, 7, 3)


def test_cran_path_loss_at_one_metre():
    g = path_loss_gain(cran_model(2.5), 1.0)
    assert -10 * math.log10(g) == pytest.approx(43.8 + 20 * math.log10(0.5), abs=1e-12)
    assert -10 * math.log10(g) == pytest.approx(37.779, abs=1e-3)


def test_macro_path_loss_at_ten_metres():
    m = PathLossModel(36.0, 40.0, 20.0, 2.5, 12.0)
    assert m.loss_db(10.0) == pytest.approx(69.979, abs=1e-3)


def test_walls_add_exact_penalty():
    m = PathLossModel(36.0, 40.0, 20.0, 2.5, 12.0)
    assert m.loss_db(50.0, 2) - m.loss_db(50.0, 0) == pytest.approx(24.0, abs=1e-12)


def test_nonpositive_distance():
    with pytest.raises(ValueError):
        path_loss_gain(cran_model(), 0.0)


def test_wall_rule_counts_boundary_crossings():
    bs = np.array([[0.0, 0.0], [100.0, 0.0]])
    users = np.array([[105.0, 0.0], [300.0, 0.0]])
    walls = wall_counts(bs, users, bs[1:], 30.0)
    # macro to indoor user crosses one wall; indoor link none; outdoor users one wall from the FBS
    np.testing.assert_array_equal(walls, [[1, 0], [0, 1]])


def test_fading_constant_without_fading():
    s = generate_topology(ScenarioConfig(seed=3, n_subchannels=4, fading=False))
    assert np.all(s.gains == s.gains[:, :, :1])


def test_fading_unit_mean():
    draws = substream(11, "fading").exponential(1.0, size=100_000)
    assert 0.99 <= draws.mean() <= 1.01
    s = generate_topology(ScenarioConfig(seed=3, n_subchannels=1, fading=False))
    g = build_channel_tensor(s, 20_000, True, 5)
    ratio = g / s.gains[:, :, None]
    assert 0.99 <= ratio.mean() <= 1.01


def test_same_seed_same_tensor():
    s = generate_topology(ScenarioConfig(seed=3))
    np.testing.assert_array_equal(build_channel_tensor(s, 3, True, 9), build_channel_tensor(s, 3, True, 9))


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 5000.0), st.floats(1.0, 5000.0))
def test_gain_decreases_with_distance(d1, d2):
    m = PathLossModel()
    if d1 < d2:
        assert path_loss_gain(m, d1) > path_loss_gain(m, d2)


def test_round_trip_serialisation():
    s = generate_topology(ScenarioConfig(seed=4, n_subchannels=2, fading=True))
    t = Scenario.from_json(s.to_json())
    for name in ("bs_positions", "user_positions", "gains", "noise", "max_powers", "home"):
        np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
    assert t.tiers == s.tiers and t.pathloss == s.pathloss and t.femto_radius == s.femto_radius


def test_csv_dump(tmp_path):
    s = generate_topology(ScenarioConfig(seed=4, n_mue=2, n_femto=1))
    path = tmp_path / "s.csv"
    s.dump_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "kind,i,j,n,value"
    assert len(lines) == 1 + 2 * s.n_bs + 2 * s.n_users + s.gains.size


@pytest.mark.parametrize("kw", [dict(r_macro=10.0, r_femto=50.0), dict(n_mue=0, n_femto=0),
                                dict(fue_per_femto=(0, 2)), dict(layout="ring"), dict(noise=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ScenarioConfig(**kw)


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        generate_topology({"n_mue": 3, "bogus": 1})


def test_invariants_enforced():
    s = generate_topology(ScenarioConfig(seed=0, n_mue=2, n_femto=1))
    with pytest.raises(ValueError):
        s.with_gains(np.zeros_like(s.gains))
    with pytest.raises(ValueError):
        s.gains[0, 0] = 1.0
