import numpy as np
import pytest
from scipy.stats import norm

from darwinrisk import regress
from darwinrisk.regress import ApproximatorSpec, TrainConfig

ALPHA = 0.99


def _data(m=20_000, seed=0):
    rng = np.random.default_rng(seed)
    x = np.exp(rng.normal(0.0, 0.3, m))
    scale = 0.1 + 0.05 * np.log(x) ** 2
    y = 0.5 * np.log(x) + scale * rng.standard_normal(m)
    return x, y, scale


def test_spec_validation():
    with pytest.raises(ValueError):
        ApproximatorSpec(family="tree")
    with pytest.raises(ValueError):
        ApproximatorSpec(degree=-1)
    with pytest.raises(ValueError):
        ApproximatorSpec(hidden=(10, 0))


def test_input_validation():
    with pytest.raises(ValueError):
        regress.fit_mean(np.ones(50), np.ones(50))
    with pytest.raises(ValueError):
        regress.fit_mean(np.ones(200), np.full(200, np.nan))
    with pytest.raises(ValueError):
        regress.fit_mean(-np.ones(200), np.ones(200))
    with pytest.raises(ValueError):
        regress.fit_quantile(np.ones(200), np.ones(200), 1.0)


def test_poly_mean_recovers_polynomial_in_log():
    x, _, _ = _data()
    y = 1.0 + 2.0 * np.log(x) - np.log(x) ** 3
    f = regress.fit_mean(x, y)
    assert np.max(np.abs(f(x) - y)) < 1e-9


def test_poly_quantile_and_es():
    x, y, scale = _data()
    q = regress.fit_quantile(x, y, ALPHA)
    es = regress.fit_es(x, y, ALPHA, q)
    grid = np.exp(np.linspace(-0.5, 0.5, 11))
    sc = 0.1 + 0.05 * np.log(grid) ** 2
    true_q = 0.5 * np.log(grid) + sc * norm.ppf(ALPHA)
    true_es = 0.5 * np.log(grid) + sc * norm.pdf(norm.ppf(ALPHA)) / (1 - ALPHA)
    assert np.max(np.abs(q(grid) - true_q)) < 0.03
    assert np.max(np.abs(es(grid) - true_es)) < 0.03
    exceed = np.mean(y > q(x))
    assert 0.008 < exceed < 0.012
    assert es.kind == "es" and q.kind == "quantile"


def test_quantile_on_constant_state():
    rng = np.random.default_rng(2)
    y = rng.standard_normal(5000)
    q = regress.fit_quantile(np.ones(5000), y, 0.9)
    assert q(np.array([1.0]))[0] == pytest.approx(np.quantile(y, 0.9), abs=0.02)


def test_clipping_outside_training_range():
    x, y, _ = _data(2000)
    f = regress.fit_mean(x, y)
    assert f(np.array([1e-6]))[0] == pytest.approx(f(np.array([x.min()]))[0])
    assert f(np.array([1e6]))[0] == pytest.approx(f(np.array([x.max()]))[0])


def test_es_target():
    y = np.array([0.0, 1.0, 3.0])
    assert np.allclose(regress.es_target(y, 1.0, 0.5), [1.0, 1.0, 5.0])


def test_pinball_minimized_at_quantile():
    rng = np.random.default_rng(3)
    y = rng.standard_normal(20_000)
    qs = np.linspace(0.5, 3.0, 101)
    risks = [regress.pinball_risk(y, q, ALPHA) for q in qs]
    assert abs(qs[int(np.argmin(risks))] - np.quantile(y, ALPHA)) < 0.06


def test_mlp_mean_and_quantile_are_deterministic():
    x, y, _ = _data(4000)
    spec = ApproximatorSpec("mlp", hidden=(8, 8))
    cfg = TrainConfig(epochs=30, batch_size=256, seed=5)
    a = regress.fit_mean(x, y, spec, cfg)
    b = regress.fit_mean(x, y, spec, cfg)
    grid = np.exp(np.linspace(-0.5, 0.5, 9))
    assert np.array_equal(a(grid), b(grid))
    assert np.max(np.abs(a(grid) - 0.5 * np.log(grid))) < 0.05
    assert a.trace[-1] <= a.trace[0]
    q = regress.fit_quantile(x, y, 0.9, spec, cfg)
    assert 0.07 < np.mean(y > q(x)) < 0.13


def test_mlp_divergence_raises():
    x, y, _ = _data(1000)
    with pytest.raises(regress.RegressionError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            regress.fit_mean(x, y, ApproximatorSpec("mlp"), TrainConfig(epochs=5, lr=1e200, lr_final=1e200))
    assert isinstance(err.value.trace, list)


def test_dump(tmp_path):
    x, y, _ = _data(1000)
    f = regress.fit_mean(x, y)
    bin_path, csv_path = f.dump(tmp_path / "mean")
    raw = np.fromfile(bin_path, dtype="<f8")
    assert raw.size == 6 + f.coef[0].size
    assert np.array_equal(raw[6:], f.coef[0])
    assert "step,loss" in open(csv_path).read()
