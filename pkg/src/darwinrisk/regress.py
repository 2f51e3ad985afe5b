"""Conditional mean, quantile and expected-shortfall regression on a scalar state.

Two approximator families share one interface:

* ``poly``: Legendre polynomial in the standardized log-state. Mean fits solve
  the least-squares problem exactly, quantile fits solve the pinball linear
  program exactly (HiGHS). Deterministic, no training luck.
* ``mlp``: small ReLU network trained from scratch with Adam on minibatches.

Inputs are the positive state ``S``; the models work on ``log S``
standardized on the training data, and evaluation clips to the training range.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy.optimize import linprog


class RegressionError(ArithmeticError):
    """Training diverged or the optimizer failed; carries the loss trace."""

    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass(frozen=True)
class ApproximatorSpec:
    family: str = "poly"
    degree: int = 6
    hidden: tuple = (10, 10, 10)

    def __post_init__(self):
        if self.family not in ("poly", "mlp"):
            raise ValueError(f"unknown approximator family {self.family!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if not self.hidden or any(int(w) < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 3e-3
    lr_final: float = 1e-4
    seed: int = 0


@dataclass
class Regressor:
    """A frozen fitted function of the state; call it on an array of spots."""

    spec: ApproximatorSpec
    kind: str
    x_shift: float
    x_scale: float
    z_lo: float
    z_hi: float
    y_shift: float
    y_scale: float
    coef: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def _z(self, s):
        s = np.asarray(s, dtype=float)
        z = (np.log(np.maximum(s, 1e-300)) - self.x_shift) / self.x_scale
        return np.clip(z, self.z_lo, self.z_hi)

    def __call__(self, s):
        z = self._z(s)
        if self.spec.family == "poly":
            out = legendre.legval(_to_unit(z, self.z_lo, self.z_hi), self.coef[0])
        else:
            out = _mlp_forward(self.coef, z.reshape(-1, 1))[0].reshape(z.shape)
        return self.y_shift + self.y_scale * out

    def dump(self, stem) -> tuple:
        """Write parameters (flat float64 ``.bin``) and loss trace (``.csv``)."""
        flat = np.concatenate([np.ravel(c) for c in self.coef]) if self.coef else np.zeros(0)
        header = np.array([self.x_shift, self.x_scale, self.z_lo, self.z_hi, self.y_shift, self.y_scale])
        bin_path, csv_path = f"{stem}.bin", f"{stem}.csv"
        np.concatenate([header, flat]).astype("<f8").tofile(bin_path)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# darwinrisk regressor trace v1", self.spec.family, self.kind])
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.trace):
                w.writerow([i, repr(float(v))])
        return bin_path, csv_path


def _to_unit(z, lo, hi):
    if hi <= lo:
        return np.zeros_like(z)
    return 2.0 * (z - lo) / (hi - lo) - 1.0


def _prepare(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if x.size < 100:
        raise ValueError("need at least 100 samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    if np.any(x <= 0.0):
        raise ValueError("states must be positive")
    lx = np.log(x)
    shift, scale = float(lx.mean()), float(lx.std())
    if scale == 0.0:
        scale = 1.0
    z = (lx - shift) / scale
    return z, y, shift, scale


def _design(z, lo, hi, degree):
    return legendre.legvander(_to_unit(z, lo, hi), degree)


def _poly_degree(spec, z):
    # never more coefficients than distinct states
    return min(spec.degree, max(np.unique(z).size - 1, 0))


def _new(spec, kind, z, shift, scale, y_shift=0.0, y_scale=1.0):
    return Regressor(spec, kind, shift, scale, float(z.min()), float(z.max()), y_shift, y_scale)


# --- polynomial family ------------------------------------------------------

def _poly_mean(z, y, spec, reg):
    a = _design(z, reg.z_lo, reg.z_hi, _poly_degree(spec, z))
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    reg.coef = [coef]
    reg.trace = [float(np.mean((a @ coef - y) ** 2))]
    return reg


def _poly_quantile(z, y, alpha, spec, reg):
    a = _design(z, reg.z_lo, reg.z_hi, _poly_degree(spec, z))
    p = a.shape[1]
    y_shift = float(np.median(y))
    y_scale = float(np.std(y)) or 1.0
    yt = (y - y_shift) / y_scale
    # dual of min sum alpha*u + (1-alpha)*v s.t. A b + u - v = y: box-bounded,
    # only p equality rows; the coefficients are the equality multipliers
    res = linprog(-yt, A_eq=a.T, b_eq=np.zeros(p), bounds=(alpha - 1.0, alpha), method="highs-ipm")
    if res.status != 0:
        raise RegressionError(f"quantile linear program failed: {res.message}")
    reg.y_shift, reg.y_scale = y_shift, y_scale
    coef = -np.asarray(res.eqlin.marginals)
    reg.coef = [coef]
    u = yt - a @ coef
    reg.trace = [float(np.mean(np.maximum(u, 0.0) + (1.0 - alpha) * (a @ coef)))]
    return reg


# --- small ReLU network -----------------------------------------------------

def _mlp_init(rng, widths):
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        params.append([w, np.zeros(fan_out)])
    return params


def _mlp_forward(params, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < len(params) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts[-1].ravel(), acts


def _mlp_backward(params, acts, grad_out):
    grads = []
    g = grad_out.reshape(-1, 1)
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        a_prev = acts[i]
        grads.append([a_prev.T @ g, g.sum(axis=0)])
        if i:
            g = (g @ w.T) * (acts[i] > 0.0)
    return grads[::-1]


def _train_mlp(z, y, loss_grad, spec, cfg, reg):
    rng = np.random.default_rng(cfg.seed)
    widths = (1, *[int(w) for w in spec.hidden], 1)
    params = _mlp_init(rng, widths)
    m1 = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    m2 = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    x = z.reshape(-1, 1)
    n = z.size
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, acts = _mlp_forward(params, x[idx])
            _, g = loss_grad(out, y[idx])
            grads = _mlp_backward(params, acts, g / idx.size)
            step += 1
            # geometric decay from lr to lr_final over the run
            lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (step / total)
            for p, gr, s1, s2 in zip(params, grads, m1, m2):
                for j in range(2):
                    s1[j] = b1 * s1[j] + (1 - b1) * gr[j]
                    s2[j] = b2 * s2[j] + (1 - b2) * gr[j] ** 2
                    p[j] = p[j] - lr * (s1[j] / (1 - b1 ** step)) / (np.sqrt(s2[j] / (1 - b2 ** step)) + eps)
        full, _ = _mlp_forward(params, x)
        loss, _ = loss_grad(full, y)
        if not math.isfinite(loss):
            raise RegressionError(f"non-finite training loss at epoch {epoch}", trace)
        trace.append(loss)
    reg.coef = params
    reg.trace = trace
    return reg


def _squared(out, y):
    r = out - y
    return float(np.mean(r * r)), 2.0 * r


def _pinball(alpha):
    def loss_grad(out, y):
        u = y - out
        # (y - phi)^+ + (1 - alpha) phi, up to a constant
        loss = float(np.mean(np.maximum(u, 0.0) + (1.0 - alpha) * out))
        return loss, np.where(u > 0.0, -1.0, 0.0) + (1.0 - alpha)
    return loss_grad


# --- public fits ---------------------------------------------------------

def fit_mean(x, y, spec: ApproximatorSpec = ApproximatorSpec(), cfg: TrainConfig = TrainConfig()) -> Regressor:
    """Least-squares fit of ``E[y | x]``."""
    z, y, shift, scale = _prepare(x, y)
    if spec.family == "poly":
        return _poly_mean(z, y, spec, _new(spec, "mean", z, shift, scale))
    y_shift, y_scale = float(y.mean()), float(y.std()) or 1.0
    reg = _new(spec, "mean", z, shift, scale, y_shift, y_scale)
    return _train_mlp(z, (y - y_shift) / y_scale, _squared, spec, cfg, reg)


def fit_quantile(x, y, alpha: float, spec: ApproximatorSpec = ApproximatorSpec(),
                 cfg: TrainConfig = TrainConfig()) -> Regressor:
    """Conditional ``alpha``-quantile by pinball-loss minimization."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    z, y, shift, scale = _prepare(x, y)
    if spec.family == "poly":
        return _poly_quantile(z, y, alpha, spec, _new(spec, "quantile", z, shift, scale))
    y_shift = float(np.quantile(y, alpha))
    y_scale = float(y.std()) or 1.0
    reg = _new(spec, "quantile", z, shift, scale, y_shift, y_scale)
    return _train_mlp(z, (y - y_shift) / y_scale, _pinball(alpha), spec, cfg, reg)


def es_target(y, var, alpha: float):
    """Second-stage target whose conditional mean is the expected shortfall."""
    return var + np.maximum(np.asarray(y) - var, 0.0) / (1.0 - alpha)


def fit_es(x, y, alpha: float, var_regressor: Regressor, spec: ApproximatorSpec = ApproximatorSpec(),
           cfg: TrainConfig = TrainConfig()) -> Regressor:
    """Conditional expected shortfall given a frozen VaR regressor."""
    x = np.asarray(x, dtype=float).ravel()
    target = es_target(np.asarray(y, dtype=float).ravel(), var_regressor(x), alpha)
    reg = fit_mean(x, target, spec, cfg)
    reg.kind = "es"
    return reg


def pinball_risk(y, q, alpha: float) -> float:
    u = np.asarray(y) - np.asarray(q)
    return float(np.mean(np.maximum(u, 0.0) + (1.0 - alpha) * np.asarray(q)))
