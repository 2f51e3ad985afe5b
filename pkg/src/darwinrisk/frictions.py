"""Transaction-cost HVA for the recalibrated delta hedge.

Proportional costs scaled by sqrt(h): rebalancing at node j costs
``k * sqrt(h)/2 * S_j * |delta_j - delta_{j-1}|``. With ruin the spot and the
delta jump to 0 together, so the ruin node itself costs nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import analytics, regress
from .core import Estimate, ModelParams, TimeGrid
from .hva import hedge_deltas
from .model import PathBatch, RngPolicy, SimulatedPath, simulate_paths

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

CONVERGENCE_LEVELS = (30, 60, 120, 240, 480, 960)


@dataclass(frozen=True)
class FrictionConfig:
    """``exit_cost`` books the unwind of the last hedge at T; ``entry_cost`` the
    initial purchase at 0. Both are off in the strict zero-boundary convention."""

    k: float = 0.1
    n: int = 120
    exit_cost: bool = True
    entry_cost: bool = False

    def __post_init__(self):
        if not (self.k >= 0.0 and math.isfinite(self.k)):
            raise ValueError("k must be finite and >= 0")
        if self.n < 2:
            raise ValueError("n must be >= 2")

    def replace(self, **changes) -> "FrictionConfig":
        fields = dict(k=self.k, n=self.n, exit_cost=self.exit_cost, entry_cost=self.entry_cost)
        fields.update(changes)
        return FrictionConfig(**fields)


@dataclass(frozen=True)
class FrictionSeries:
    grid: TimeGrid
    f_cum: np.ndarray
    driver: np.ndarray | None = None


def _check_grid(grid: TimeGrid, cfg: FrictionConfig):
    if grid.steps != cfg.n:
        raise ValueError(f"path has {grid.steps} steps, friction config expects n={cfg.n}")
    dt = grid.dt
    if not np.allclose(dt, dt[0], rtol=1e-12, atol=0.0):
        raise ValueError("discrete costs need a uniform hedge grid")


def live_cost_increments(grid: TimeGrid, bs_spot, bs_vol, cfg: FrictionConfig, params: ModelParams):
    """Per-node costs along the never-ruined auxiliary path, shape (paths, n+1).

    Masking these with ``t_j < ruin`` gives the fair-model costs, because the
    spot and the delta vanish together at the ruin node.
    """
    _check_grid(grid, cfg)
    bs_spot = np.atleast_2d(bs_spot)
    live = np.ones(bs_spot.shape, dtype=bool)
    delta = hedge_deltas(grid, bs_spot, bs_vol, live, params)
    scale = cfg.k * math.sqrt(grid.dt[0]) / 2.0
    inc = np.zeros(bs_spot.shape)
    inc[:, 1:] = scale * bs_spot[:, 1:] * np.abs(np.diff(delta, axis=1))
    if not cfg.exit_cost:
        inc[:, -1] = 0.0
    if cfg.entry_cost:
        inc[:, 0] = scale * bs_spot[:, 0] * np.abs(delta[:, 0])
    return inc


def discrete_costs(path: SimulatedPath | PathBatch, cfg: FrictionConfig, params: ModelParams) -> FrictionSeries:
    """Cumulative rebalancing costs ``f^h`` at every node of the hedge grid."""
    grid = path.grid
    grid.check_maturity(params)
    if isinstance(path, SimulatedPath):
        inc = live_cost_increments(grid, path.bs_spot, _vol_of(path), cfg, params)[0]
        inc = np.where(path.alive, inc, 0.0)
        return FrictionSeries(grid, np.cumsum(inc))
    inc = live_cost_increments(grid, path.bs_spot, path.bs_vol, cfg, params)
    return FrictionSeries(grid, np.cumsum(np.where(path.alive, inc, 0.0), axis=1))


def _vol_of(path: SimulatedPath):
    # implied vol of the auxiliary spot is needed up to the ruin node only; after
    # it the masked increments are discarded anyway
    return np.where(path.alive, path.implied_vol, path.implied_vol[0])


def friction_driver(t, s, vol, params: ModelParams, cfg: FrictionConfig, dsigma_ds=None):
    """Continuous-rebalancing cost rate ``k/sqrt(2 pi) * S * |dS-coefficient of delta|``.

    The delta ``dP/dS(t, S, Sigma(t, S))`` diffuses with coefficient
    ``Gamma * sigma*S + vanna * varsigma`` where ``varsigma = dSigma/dS * sigma*S``.
    ``dsigma_ds`` may be supplied; otherwise it is a finite difference.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    t, s, vol = np.broadcast_arrays(t, s, vol)
    tau = params.maturity - t
    if np.any(tau <= 0.0):
        raise ValueError("friction_driver requires t < T")
    live = s >= analytics.RUIN_EPS
    s_safe = np.where(live, s, params.strike)
    v_safe = np.where(live & (vol > 0.0), vol, params.sigma)
    if dsigma_ds is None:
        dsigma_ds = np.where(live, analytics.implied_vol_slope(t, s_safe, params), 0.0)
    _, _, gamma, vanna = analytics.bs_put_greeks(tau, s_safe, v_safe, params.strike)
    diffusion = params.sigma * s_safe
    rate = cfg.k * _INV_SQRT_2PI * s_safe * np.abs(gamma * diffusion + vanna * dsigma_ds * diffusion)
    rate = np.where(live, rate, 0.0)
    return float(rate) if rate.ndim == 0 else rate


def hva_f_forward(paths: PathBatch, cfg: FrictionConfig, params: ModelParams) -> Estimate:
    """``E f^h_T`` by plain Monte Carlo (the time-0 discrete friction HVA)."""
    if len(paths) < 100:
        raise ValueError("need at least 100 paths")
    f = discrete_costs(paths, cfg, params).f_cum[:, -1]
    return Estimate.from_samples(f)


@dataclass
class PathwiseHvaF:
    """Backward-regressed ``HVA^f(t_i, S)`` on the capital dates.

    ``regressors[i]`` approximates the date-i function on live states; the last
    date is identically 0 and absorbed states map to 0.
    """

    times: np.ndarray
    regressors: list
    estimate0: Estimate

    def __call__(self, i: int, s):
        s = np.asarray(s, dtype=float)
        if i >= len(self.regressors):
            return np.zeros(s.shape)
        if i == 0:
            return np.where(s > 0.0, self.estimate0.value, 0.0)
        return np.where(s > 0.0, self.regressors[i](np.where(s > 0.0, s, 1.0)), 0.0)

    def path_values(self, states, alive):
        """Values at every capital date for paths given states and live flags."""
        out = np.zeros(states.shape)
        for i in range(states.shape[1]):
            out[:, i] = self(i, np.where(alive[:, i], states[:, i], 0.0))
        return out


def hva_f_pathwise(times, states, increments, alive_next, spec=regress.ApproximatorSpec(),
                   cfg=regress.TrainConfig()) -> PathwiseHvaF:
    """Dynamic programming for the friction HVA on a coarse grid.

    ``states[:, i]`` is the live auxiliary spot at date i, ``increments[:, i]`` the
    cost over (t_i, t_{i+1}] of a path started alive at t_i, and ``alive_next[:, i]``
    tells whether that path survives to t_{i+1}.
    """
    states = np.asarray(states, dtype=float)
    c = increments.shape[1]
    regs = [None] * c
    nxt = np.zeros(states.shape[0])
    for i in range(c - 1, 0, -1):
        y = increments[:, i] + np.where(alive_next[:, i], nxt, 0.0)
        regs[i] = regress.fit_mean(states[:, i], y, spec, cfg)
        nxt = regs[i](states[:, i])
    y0 = increments[:, 0] + np.where(alive_next[:, 0], nxt, 0.0)
    regs[0] = None
    return PathwiseHvaF(np.asarray(times, dtype=float), regs, Estimate.from_samples(y0))


def convergence_study(params: ModelParams, paths: int, k: float = 0.1, seed: int = 0,
                      levels=CONVERGENCE_LEVELS, exit_cost: bool = True, entry_cost: bool = False,
                      chunk: int = 5000, workers: int = 1):
    """``E f^h_T`` for each step count in ``levels`` with common random numbers.

    Paths are simulated once on the finest grid; coarser levels subsample it.
    Returns rows ``(n, h, value, stderr, ci_lo, ci_hi)`` plus per-level paired
    standard errors of successive differences.
    """
    levels = sorted(int(n) for n in levels)
    finest = levels[-1]
    if any(finest % n for n in levels):
        raise ValueError("every level must divide the finest step count")
    fine = TimeGrid.uniform(params.maturity, finest)
    rng = RngPolicy(seed)
    sums = {n: [] for n in levels}
    for start in range(0, paths, chunk):
        idx = np.arange(start, min(paths, start + chunk))
        batch = simulate_paths(params, fine, rng, idx, chunk=chunk, workers=workers)
        for n in levels:
            cfg = FrictionConfig(k=k, n=n, exit_cost=exit_cost, entry_cost=entry_cost)
            sub = batch.coarsen(finest // n)
            sums[n].append(discrete_costs(sub, cfg, params).f_cum[:, -1])
    samples = {n: np.concatenate(sums[n]) for n in levels}
    rows = []
    for n in levels:
        est = Estimate.from_samples(samples[n])
        rows.append((n, params.maturity / n, est.value, est.stderr, est.ci_lo, est.ci_hi))
    diffs = []
    for a, b in zip(levels[:-1], levels[1:]):
        d = samples[a] - samples[b]
        e = Estimate.from_samples(d)
        diffs.append((a, b, e.value, e.stderr))
    return rows, diffs


CONVERGENCE_HEADER = ("n", "h", "hva_h", "stderr", "ci_lo", "ci_hi")


def write_convergence_csv(path, rows, version="darwinrisk-csv v1"):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {version} convergence\n")
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_HEADER)
        for r in rows:
            w.writerow([r[0], repr(r[1])] + [repr(float(x)) for x in r[2:]])
