import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from darwinrisk import capital
from darwinrisk.capital import CapitalParams
from darwinrisk.core import ModelParams, TimeGrid
from darwinrisk.frictions import FrictionConfig, discrete_costs
from darwinrisk.hva import HedgeScheme, delta_deal_series, hva_closed_form, static_deal_series
from darwinrisk.model import RngPolicy, simulate_paths

P = ModelParams()
CP = CapitalParams()
CAP = TimeGrid.uniform(10.0, 10)


@pytest.fixture(scope="module")
def batch():
    return simulate_paths(P, TimeGrid.uniform(10.0, 40), RngPolicy(21), 3000, restarts=10)


def test_capital_params_validation():
    with pytest.raises(ValueError):
        CapitalParams(alpha=1.0)
    with pytest.raises(ValueError):
        CapitalParams(hurdle=-0.1)


def test_static_closed_form_values():
    ec, kva = capital.ec_kva_static_closed_form(0.0, True, CP, P, limit=True)
    assert ec == pytest.approx(math.exp(-0.1), abs=1e-15)
    assert kva == pytest.approx(math.exp(-0.1) * (1 - math.exp(-0.9)), abs=1e-15)
    # 0.99 is above e^{-0.01}: one-year ruin probability is below 1%
    assert capital.ec_kva_static_closed_form(0.0, True, CP, P) == (0.0, 0.0)
    hi = CapitalParams(alpha=0.995)
    assert capital.static_theta(hi, P) == pytest.approx(10 + math.log(0.995) / 0.01)
    t = np.array([0.0, 5.0, 9.0, 9.9, 10.0])
    ec, kva = capital.ec_kva_static_closed_form(t, np.ones(5, bool), hi, P)
    assert np.allclose(ec[:3], np.exp(-0.01 * (10 - t[:3])))
    # past theta = 9.4987 the one-year ruin probability drops below 0.5%
    assert ec[3] == ec[4] == 0.0 and np.all(kva <= ec)
    ec, kva = capital.ec_kva_static_closed_form(1.0, False, hi, P)
    assert ec == kva == 0.0


def test_static_kva_solves_recursion():
    # KVA(t) = E int_t^T r (EC - KVA)^+ ds along the surviving path, checked by quadrature
    hi = CapitalParams(alpha=0.995)

    def integrand(s):
        ec, kva = capital.ec_kva_static_closed_form(s, True, hi, P)
        return math.exp(-P.lam * s) * hi.hurdle * max(ec - kva, 0.0)

    theta = capital.static_theta(hi, P)
    val, _ = quad(integrand, 0.0, theta, epsabs=1e-13)
    assert val == pytest.approx(capital.ec_kva_static_closed_form(0.0, True, hi, P)[1], rel=1e-10)


def test_lambda_sweep_monotone():
    rows = capital.lambda_sweep([0.005, 0.01, 0.02, 0.05], P, CP)
    assert rows[1][1] == pytest.approx(hva_closed_form(0.0, True, P))
    assert rows[1][5] == pytest.approx(5.642, abs=1e-3)
    for a, b in zip(rows[:-1], rows[1:]):
        assert b[4] > a[4] and b[6] > a[6]


def test_empirical_var_es_constant_and_oracle():
    var, es, _ = capital.empirical_var_es(np.full(1000, 0.3), 0.99)
    assert var == es == 0.3
    x = np.arange(1, 101, dtype=float)
    var, es, _ = capital.empirical_var_es(x, 0.95)
    assert var == 95.0 and es == pytest.approx(np.mean([95, 96, 97, 98, 99, 100]))


def test_var_es_normal_sample():
    x = np.random.default_rng(0).standard_normal(200_000)
    t = capital.var_es_unconditional(x, CP)
    assert abs(t.var.value - norm.ppf(0.99)) < 4 * t.var.stderr
    assert abs(t.es.value - norm.pdf(norm.ppf(0.99)) / 0.01) < 4 * t.es.stderr
    assert t.exceedances == pytest.approx(2000, abs=5)
    assert capital.bootstrap_es_se(x[:20_000], 0.99, reps=50) > 0


def test_static_intervals_by_hand(batch):
    data = capital.build_intervals(batch, CAP, P, HedgeScheme.static())
    inc = capital.loss_increments(data)
    hva = lambda t: hva_closed_form(t, True, P)  # noqa: E731
    for i in (0, 4, 9):
        jb = data.alive_next[:, i]
        expect = np.where(jb, hva(CAP.times[i + 1]), P.strike) - hva(CAP.times[i])
        assert np.allclose(inc[:, i], expect, atol=1e-15)
    ruin = batch.delays[:, 3] <= 1.0
    assert np.array_equal(~data.alive_next[:, 3], ruin)


def test_genuine_loss_matches_deal_series(batch):
    data = capital.build_intervals(batch, CAP, P, HedgeScheme.static())
    g = capital.genuine_loss(data)
    direct = capital.assemble_loss(static_deal_series(batch, P), CAP)
    assert np.allclose(g.loss, direct.loss, atol=1e-12)

    cfg = FrictionConfig(k=0.1, n=40)
    data = capital.build_intervals(batch, CAP, P, HedgeScheme("delta", 40, 0.1), cfg)
    g = capital.genuine_loss(data)
    deal = delta_deal_series(batch, P)
    direct = capital.assemble_loss(deal, CAP, discrete_costs(batch, cfg, P))
    assert np.allclose(g.loss, direct.loss, atol=1e-12)


def test_assemble_loss_grid_check(batch):
    deal = static_deal_series(batch, P)
    other = simulate_paths(P, TimeGrid.uniform(10.0, 20), RngPolicy(1), 5)
    with pytest.raises(ValueError):
        capital.assemble_loss(deal, CAP, discrete_costs(other, FrictionConfig(n=20), P))


def test_kva_dynamic_constant_ec():
    m, c = 400, 10
    times = np.arange(c + 1.0)
    states = np.ones((m, c + 1))
    alive = np.ones((m, c), dtype=bool)
    e = 0.5
    ec_fn = lambda i, s: np.where(np.asarray(s) > 0, e, 0.0)  # noqa: E731
    _, k0 = capital.kva_dynamic(times, states, alive, ec_fn, CP)
    k = 0.0
    for i in range(c - 1, -1, -1):
        ec_next = e if i + 1 < c else 0.0
        k = 0.1 * max(ec_next - k, 0.0) + k
    assert k0.value == pytest.approx(k, abs=1e-14)


def test_static_mc_matches_closed_form_above_threshold(batch):
    hi = CapitalParams(alpha=0.995)
    cap_batch = simulate_paths(P, CAP, RngPolicy(8), 20_000, restarts=10, with_vol=False)
    data = capital.build_intervals(cap_batch, CAP, P, HedgeScheme.static())
    res = capital.static_capital_mc(data, hi)
    ec, kva = capital.ec_kva_static_closed_form(CAP.times, np.ones(11, bool), hi, P)
    # ruin in the year beats the 0.5% tail on every date, so the ES is exactly K - HVA(t)
    assert np.allclose(res.ec[:-1], ec[:-1], atol=1e-12)
    assert abs(res.kva0.value - kva[0]) < 4 * res.kva0.stderr + 0.01


def test_term_structure_and_csv(tmp_path):
    vals = np.tile(np.arange(3.0), (100, 1))
    alive = np.ones((100, 3), dtype=bool)
    alive[:50, 2] = False
    rows = capital.term_structure(np.array([0.0, 1.0, 2.0]), vals, alive)
    assert rows[1][1] == 1.0 and rows[2][1] == 1.0
    path = tmp_path / "t.csv"
    capital.write_csv(path, capital.TERM_HEADER, rows, "test")
    text = path.read_text().splitlines()
    assert text[0] == "# darwinrisk-csv v1 test"
    assert text[1] == ",".join(capital.TERM_HEADER)
