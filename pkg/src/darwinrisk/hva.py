"""Deal-level model risk for the vulnerable put: raw pnl, frictionless HVA and
their decomposition under the static and the delta hedging schemes.

The bank holds the vulnerable put, marks it with its recalibrated
Black-Scholes model (which reproduces the jump-to-ruin *vanilla* put price)
and either shorts the vanilla put (static) or delta hedges in the spot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analytics
from .core import ModelParams, TimeGrid
from .model import PathBatch, SimulatedPath


@dataclass(frozen=True)
class HedgeScheme:
    kind: str = "delta"
    rebalance_steps: int | None = 120
    friction_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "delta"):
            raise ValueError(f"unknown hedge kind {self.kind!r}")
        if self.kind == "static":
            if self.friction_coeff != 0.0:
                raise ValueError("the static hedge does not trade, it carries no friction")
        else:
            if self.rebalance_steps is None or self.rebalance_steps < 1:
                raise ValueError("delta hedging needs rebalance_steps >= 1")
            if self.friction_coeff < 0.0:
                raise ValueError("friction coefficient must be >= 0")

    @classmethod
    def static(cls):
        return cls("static", None, 0.0)


@dataclass(frozen=True)
class DealSeries:
    """Per-node deal quantities; arrays are 1-d for a path, 2-d (paths, nodes) for a batch."""

    grid: TimeGrid
    raw_pnl: np.ndarray
    hva: np.ndarray
    hedge_gain: np.ndarray
    darwin_d: np.ndarray

    @property
    def compensated(self):
        """``-pnl + HVA - HVA_0``: the deal part of the trading loss."""
        return -self.raw_pnl + self.hva - self.hva[..., :1]


def hva_closed_form(t, pre_ruin, params: ModelParams):
    """Frictionless HVA, identical for both schemes: ``J K (1 - e^{-lam (T-t)})``."""
    tau = params.maturity - np.asarray(t, dtype=float)
    if np.any(tau < 0.0):
        raise ValueError("t must be <= T")
    alive = np.asarray(pre_ruin, dtype=bool)
    value = np.where(alive, params.strike * -np.expm1(-params.lam * tau), 0.0)
    return float(value) if value.ndim == 0 else value


def _as_batch_arrays(path):
    if isinstance(path, SimulatedPath):
        return path.grid, path.spot[None, :], path.implied_vol[None, :], path.alive[None, :], True
    return path.grid, path.spot, path.implied_vol, path.alive, False


def _pack(grid, single, raw_pnl, hva, gain):
    d = np.zeros_like(raw_pnl)
    if single:
        return DealSeries(grid, raw_pnl[0], hva[0], gain[0], d[0])
    return DealSeries(grid, raw_pnl, hva, gain, d)


def static_deal_series(path: SimulatedPath | PathBatch, params: ModelParams) -> DealSeries:
    """Long vulnerable put, short vanilla put: a perfect hedge until ruin, then
    the vanilla leg pays ``K`` while the vulnerable put is worthless."""
    grid, _, _, alive, single = _as_batch_arrays(path)
    grid.check_maturity(params)
    raw_pnl = np.where(alive, 0.0, -params.strike)
    hva = hva_closed_form(grid.times[None, :], alive, params)
    return _pack(grid, single, raw_pnl, hva, np.zeros_like(raw_pnl))


def hedge_deltas(grid: TimeGrid, spot, vol, alive, params: ModelParams):
    """Black-Scholes put delta at the recalibrated vol; 0 at and after ruin and at T."""
    spot = np.atleast_2d(spot)
    vol = np.atleast_2d(vol)
    alive = np.atleast_2d(alive)
    tau = params.maturity - grid.times[:-1]
    live = alive[:, :-1]
    s = np.where(live, spot[:, :-1], params.strike)
    v = np.where(live, vol[:, :-1], params.sigma)
    _, delta, _, _ = analytics.bs_put_greeks(tau[None, :], s, v, params.strike)
    out = np.zeros(spot.shape)
    out[:, :-1] = np.where(live, delta, 0.0)
    return out


def delta_deal_series(path: SimulatedPath | PathBatch, params: ModelParams) -> DealSeries:
    """Long vulnerable put delta hedged in the spot at every grid node.

    The position is marked at the jump-to-ruin vanilla put price (the trader's
    recalibrated Black-Scholes value) and pays ``(K - S_T)^+`` at T if alive.
    """
    grid, spot, vol, alive, single = _as_batch_arrays(path)
    grid.check_maturity(params)
    delta = hedge_deltas(grid, spot, vol, alive, params)
    gain = np.zeros(spot.shape)
    # held from one node to the next (left-limit convention); the ruin step books delta * (0 - S)
    gain[:, 1:] = np.cumsum(delta[:, :-1] * np.diff(spot, axis=1), axis=1)
    mark = np.where(alive, analytics.jr_vanilla_put_price(grid.times[None, :], spot, params), 0.0)
    p0 = analytics.jr_vanilla_put_price(0.0, spot[:, 0], params)
    raw_pnl = mark - p0[:, None] - gain
    hva = hva_closed_form(grid.times[None, :], alive, params)
    return _pack(grid, single, raw_pnl, hva, gain)


def ruin_jump_loss(t, s, vol, params: ModelParams):
    """Size of the pnl drop when ruin hits at t with pre-ruin state (s, vol): ``K N(-d_-(t, s; 0, vol))``."""
    dp = analytics.d_pm(t, s, 0.0, vol, params)
    return params.strike * analytics.norm_cdf(-np.asarray(dp.d_minus))
