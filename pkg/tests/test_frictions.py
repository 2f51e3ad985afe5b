import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darwinrisk import analytics, regress
from darwinrisk.core import ModelParams, TimeGrid
from darwinrisk.frictions import (FrictionConfig, convergence_study, discrete_costs, friction_driver,
                                  hva_f_forward, hva_f_pathwise, live_cost_increments, write_convergence_csv)
from darwinrisk.model import RngPolicy, simulate_paths

P = ModelParams()


@pytest.fixture(scope="module")
def batch():
    return simulate_paths(P, TimeGrid.uniform(10.0, 24), RngPolicy(4), 2000)


def test_config_validation():
    with pytest.raises(ValueError):
        FrictionConfig(k=-0.1)
    with pytest.raises(ValueError):
        FrictionConfig(n=1)
    assert FrictionConfig().replace(k=0.2).k == 0.2


def test_grid_mismatch(batch):
    with pytest.raises(ValueError):
        discrete_costs(batch, FrictionConfig(n=120), P)


def test_costs_by_hand(batch):
    cfg = FrictionConfig(k=0.1, n=24)
    row = 5
    g = batch.grid
    s, vol = batch.bs_spot[row], batch.bs_vol[row]
    deltas = [analytics.bs_put_delta(t, x, v, P) for t, x, v in zip(g.times[:-1], s[:-1], vol[:-1])] + [0.0]
    h = 10.0 / 24
    expect = [0.0] + [0.1 * math.sqrt(h) / 2 * s[j] * abs(deltas[j] - deltas[j - 1]) for j in range(1, 25)]
    inc = live_cost_increments(g, s[None, :], vol[None, :], cfg, P)[0]
    assert np.allclose(inc, expect, rtol=1e-13, atol=0.0)
    no_exit = live_cost_increments(g, s[None, :], vol[None, :], cfg.replace(exit_cost=False), P)[0]
    assert no_exit[-1] == 0.0 and np.array_equal(no_exit[:-1], inc[:-1])
    entry = live_cost_increments(g, s[None, :], vol[None, :], cfg.replace(entry_cost=True), P)[0]
    assert entry[0] == pytest.approx(0.1 * math.sqrt(h) / 2 * s[0] * abs(deltas[0]))


def test_costs_stop_at_ruin(batch):
    cfg = FrictionConfig(k=0.1, n=24)
    f = discrete_costs(batch, cfg, P).f_cum
    assert np.all(np.diff(f, axis=1) >= 0.0)
    ruined = ~batch.alive
    frozen = np.where(ruined[:, 1:], np.diff(f, axis=1), 0.0)
    assert np.all(frozen == 0.0)
    one = discrete_costs(batch.path(3), cfg, P).f_cum
    assert np.allclose(one, f[3])


def test_costs_scale_linearly_in_k(batch):
    a = discrete_costs(batch, FrictionConfig(k=0.1, n=24), P).f_cum
    b = discrete_costs(batch, FrictionConfig(k=0.3, n=24), P).f_cum
    assert np.allclose(b, 3 * a)
    assert hva_f_forward(batch, FrictionConfig(k=0.1, n=24), P).value == pytest.approx(a[:, -1].mean())


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.0, 9.0), s=st.floats(0.4, 2.5))
def test_driver_vs_total_delta_difference(t, s):
    cfg = FrictionConfig(k=0.1)
    vol = analytics.implied_vol(t, s, P)

    def total_delta(x):
        return analytics.bs_put_delta(t, x, analytics.implied_vol(t, x, P), P)

    h = 1e-4 * s
    slope = (total_delta(s + h) - total_delta(s - h)) / (2 * h)
    oracle = 0.1 / math.sqrt(2 * math.pi) * s * abs(slope * P.sigma * s)
    assert friction_driver(t, s, vol, P, cfg) == pytest.approx(oracle, rel=1e-5, abs=1e-12)


def test_driver_domain():
    cfg = FrictionConfig()
    assert friction_driver(1.0, 0.0, 0.0, P, cfg) == 0.0
    with pytest.raises(ValueError):
        friction_driver(P.maturity, 1.0, 0.3, P, cfg)
    out = friction_driver(np.array([1.0, 2.0]), np.array([1.0, 0.0]), np.array([0.31, 0.0]), P, cfg)
    assert out.shape == (2,) and out[1] == 0.0


def test_pathwise_dp_constant_costs():
    rng = np.random.default_rng(0)
    m, c = 500, 4
    states = np.exp(rng.normal(size=(m, c + 1)) * 0.2)
    inc = np.full((m, c), 0.01)
    alive = np.ones((m, c), dtype=bool)
    fit = hva_f_pathwise(np.arange(c + 1.0), states, inc, alive)
    assert fit.estimate0.value == pytest.approx(0.04, abs=1e-12)
    assert np.allclose(fit(2, states[:, 2]), 0.02, atol=1e-10)
    assert np.all(fit(2, np.zeros(3)) == 0.0)
    assert np.all(fit(c, states[:, c]) == 0.0)


def test_pathwise_dp_with_ruin_matches_survival():
    rng = np.random.default_rng(1)
    m, c = 20_000, 3
    states = np.exp(rng.normal(size=(m, c + 1)) * 0.2)
    inc = np.full((m, c), 0.01)
    alive = rng.random((m, c)) < 0.5
    fit = hva_f_pathwise(np.arange(c + 1.0), states, inc, alive, regress.ApproximatorSpec(degree=2))
    # 0.01 * (1 + 1/2 + 1/4)
    assert abs(fit.estimate0.value - 0.0175) < 4 * fit.estimate0.stderr + 1e-4


def test_convergence_study_small(tmp_path):
    rows, diffs = convergence_study(P, 400, k=0.1, seed=3, levels=(12, 24), chunk=200)
    assert [r[0] for r in rows] == [12, 24]
    assert len(diffs) == 1
    fine = simulate_paths(P, TimeGrid.uniform(10.0, 24), RngPolicy(3), 400)
    direct = discrete_costs(fine, FrictionConfig(k=0.1, n=24), P).f_cum[:, -1].mean()
    assert rows[1][2] == pytest.approx(direct, rel=1e-12)
    assert diffs[0][2] == pytest.approx(rows[0][2] - rows[1][2], rel=1e-9)
    path = tmp_path / "c.csv"
    write_convergence_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# darwinrisk-csv v1") and lines[1] == "n,h,hva_h,stderr,ci_lo,ci_hi"
    with pytest.raises(ValueError):
        convergence_study(P, 100, levels=(7, 24))
