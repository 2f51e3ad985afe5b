"""Closed-form pricing, hedging and calibration in the jump-to-ruin and
Black-Scholes models.

All functions broadcast over numpy arrays and return a float when every
input is scalar. Rates are zero; the only drift is the ruin compensator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .core import ModelParams

# spot below this is treated as the absorbed (ruined) state
RUIN_EPS = 1e-12

VOL_LO = 1e-8
VOL_HI = 5.0
VOL_HI_MAX = 200.0

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

norm_cdf = ndtr


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x) - _LOG_SQRT_2PI)


class NoBracket(ArithmeticError):
    """The target price is outside the Black-Scholes price range."""


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _time_to_expiry(t, params: ModelParams):
    return params.maturity - np.asarray(t, dtype=float)


@dataclass(frozen=True)
class DPlusMinus:
    d_plus: np.ndarray | float
    d_minus: np.ndarray | float


def _dpm(tau, s, drift, vol, strike):
    sd = vol * np.sqrt(tau)
    m = (np.log(s / strike) + drift * tau) / sd
    return m + 0.5 * sd, m - 0.5 * sd


def d_pm(t, s, drift, vol, params: ModelParams) -> DPlusMinus:
    """``d_+`` and ``d_-`` for a forward ``s*exp(drift*(T-t))`` with total
    standard deviation ``vol*sqrt(T-t)``."""
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    if np.any(tau <= 0.0):
        raise ValueError("d_pm requires t < T")
    if np.any(s <= 0.0):
        raise ValueError("d_pm requires s > 0")
    if np.any(vol <= 0.0):
        raise ValueError("d_pm requires vol > 0")
    dp, dm = _dpm(tau, s, drift, vol, params.strike)
    return DPlusMinus(_out(dp), _out(dm))


def _live_state(t, s, params):
    """Broadcast (t, s) and split into the live region (t < T, s > 0)."""
    tau, s = np.broadcast_arrays(_time_to_expiry(t, params), np.asarray(s, dtype=float))
    if np.any(s < 0.0):
        raise ValueError("spot must be >= 0")
    if np.any(tau < 0.0):
        raise ValueError("t must be <= T")
    live = (tau > 0.0) & (s >= RUIN_EPS)
    tau_safe = np.where(live, tau, 1.0)
    s_safe = np.where(live, s, params.strike)
    return tau, s, live, tau_safe, s_safe


def jr_call_price(t, s, params: ModelParams):
    """Jump-to-ruin value of the call paying ``(S_T - K)^+``."""
    k = params.strike
    tau, s, live, tau_safe, s_safe = _live_state(t, s, params)
    dp, dm = _dpm(tau_safe, s_safe, params.lam, params.sigma, k)
    value = s_safe * norm_cdf(dp) - k * np.exp(-params.lam * tau_safe) * norm_cdf(dm)
    at_expiry = np.maximum(s - k, 0.0)
    return _out(np.where(live, value, np.where(tau > 0.0, 0.0, at_expiry)))


def jr_vanilla_put_price(t, s, params: ModelParams):
    """Jump-to-ruin value of the vanilla put ``(K - S_T)^+``; equals K once ruined."""
    k = params.strike
    tau, s, live, tau_safe, s_safe = _live_state(t, s, params)
    dp, dm = _dpm(tau_safe, s_safe, params.lam, params.sigma, k)
    disc = np.exp(-params.lam * tau_safe)
    value = k * disc * norm_cdf(-dm) - s_safe * norm_cdf(-dp) + k * (1.0 - disc)
    at_expiry = np.maximum(k - s, 0.0)
    return _out(np.where(live, value, np.where(tau > 0.0, k, at_expiry)))


def jr_vulnerable_put_price(t, s, pre_ruin, params: ModelParams):
    """Value of the vulnerable put ``(K - S_T)^+ 1{S_T > 0}``; 0 after ruin or at T."""
    k = params.strike
    tau, s = np.broadcast_arrays(_time_to_expiry(t, params), np.asarray(s, dtype=float))
    if np.any(tau < 0.0):
        raise ValueError("t must be <= T")
    alive = np.asarray(pre_ruin, dtype=bool) & (tau > 0.0)
    tau_safe = np.where(alive, tau, 1.0)
    disc = np.exp(-params.lam * tau_safe)
    s_pos = np.where(alive & (s >= RUIN_EPS), s, params.strike)
    dp, dm = _dpm(tau_safe, s_pos, params.lam, params.sigma, k)
    value = k * disc * norm_cdf(-dm) - s_pos * norm_cdf(-dp)
    # absorbed-spot limit of the formula, d_pm -> -inf
    value = np.where(s >= RUIN_EPS, value, k * disc)
    return _out(np.where(alive, value, 0.0))


# --- Black-Scholes (zero rate) put and partials --------------------------

def _check_bs_domain(tau, s, vol):
    if np.any(tau <= 0.0):
        raise ValueError("Black-Scholes greeks require t < T")
    if np.any(s <= 0.0):
        raise ValueError("Black-Scholes greeks require s > 0")
    if np.any(vol <= 0.0):
        raise ValueError("Black-Scholes greeks require vol > 0")


def bs_put_greeks(tau, s, vol, strike):
    """Unchecked (price, delta, gamma, vanna) on arrays; ``tau`` is T - t."""
    sqrt_tau = np.sqrt(tau)
    dp, dm = _dpm(tau, s, 0.0, vol, strike)
    pdf = norm_pdf(dp)
    price = strike * norm_cdf(-dm) - s * norm_cdf(-dp)
    delta = -norm_cdf(-dp)
    gamma = pdf / (s * vol * sqrt_tau)
    vanna = -pdf * dm / vol
    return price, delta, gamma, vanna


def bs_put_price(t, s, vol, params: ModelParams):
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    _check_bs_domain(tau, s, vol)
    return _out(bs_put_greeks(tau, s, vol, params.strike)[0])


def bs_put_delta(t, s, vol, params: ModelParams):
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    _check_bs_domain(tau, s, vol)
    return _out(bs_put_greeks(tau, s, vol, params.strike)[1])


def bs_put_gamma(t, s, vol, params: ModelParams):
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    _check_bs_domain(tau, s, vol)
    return _out(bs_put_greeks(tau, s, vol, params.strike)[2])


def bs_put_vanna(t, s, vol, params: ModelParams):
    """Cross partial of the put price in implied vol and spot."""
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    _check_bs_domain(tau, s, vol)
    return _out(bs_put_greeks(tau, s, vol, params.strike)[3])


def bs_put_vega(t, s, vol, params: ModelParams):
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    vol = np.asarray(vol, dtype=float)
    _check_bs_domain(tau, s, vol)
    dp, _ = _dpm(tau, s, 0.0, vol, params.strike)
    return _out(s * norm_pdf(dp) * np.sqrt(tau))


# --- implied volatility ---------------------------------------------------

def _log1mexp(x):
    """log(1 - exp(x)) for x < 0."""
    x = np.minimum(x, -1e-300)
    return np.where(x > -0.6931471805599453, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _log_black_otm(log_f, log_k, sd, call):
    """Log of an undiscounted Black call (where ``call``) or put, total std ``sd``."""
    log_f, sd, call = np.broadcast_arrays(log_f, sd, call)
    m = (log_f - log_k) / sd
    d1 = m + 0.5 * sd
    # puts are evaluated as calls under the reflection (F, K, d1, d2) -> (K, F, -d2, -d1)
    sign = np.where(call, 1.0, -1.0)
    a1 = sign * d1 + np.where(call, 0.0, sd)
    a2 = a1 - sd
    log_hi = np.where(call, log_f, log_k)
    log_lo = np.where(call, log_k, log_f)
    l1 = log_ndtr(a1)
    lp = log_hi + l1 + _log1mexp(log_lo + log_ndtr(a2) - log_hi - l1)
    return lp, d1


def _jr_log_otm_target(tau, s, params):
    """Log of the jump-to-ruin out-of-the-money vanilla price (call if s < K)."""
    lam = params.lam
    log_k = np.log(params.strike)
    log_f = np.log(s) + lam * tau
    sd = params.sigma * np.sqrt(tau)
    call = s < params.strike
    lb, _ = _log_black_otm(log_f, log_k, sd, call)
    # put side carries the ruin leg K(1 - e^{-lam tau}) on top of the discounted Black put
    ruin_leg = log_k + np.log(-np.expm1(-lam * tau))
    put_side = np.logaddexp(lb - lam * tau, ruin_leg)
    return np.where(call, lb - lam * tau, put_side), call


def implied_vol(t, s, params: ModelParams, tol: float = 1e-14, max_iter: int = 200, guess=None):
    """Black-Scholes (zero rate) implied volatility of the jump-to-ruin vanilla put.

    Returns 0 at the absorbed state ``s = 0``. The root is found on the
    out-of-the-money side (call for s < K, put otherwise, equivalent by parity)
    in log-price, by Newton steps safeguarded by a bisection bracket on the
    total standard deviation.
    """
    tau, s = np.broadcast_arrays(_time_to_expiry(t, params), np.asarray(s, dtype=float))
    if np.any(tau <= 0.0):
        raise ValueError("implied_vol requires t < T")
    if np.any(s < 0.0):
        raise ValueError("spot must be >= 0")
    shape = s.shape
    tau = tau.ravel()
    s = s.ravel()
    out = np.zeros(s.size)
    live = s >= RUIN_EPS
    if not np.any(live):
        return _out(out.reshape(shape))

    tau_l, s_l = tau[live], s[live]
    sqrt_tau = np.sqrt(tau_l)
    target, call = _jr_log_otm_target(tau_l, s_l, params)
    log_s = np.log(s_l)
    log_k = np.log(params.strike)

    def g_and_slope(sd, idx=slice(None)):
        lp, d1 = _log_black_otm(log_s[idx], log_k, sd, call[idx])
        # d/d(sd) log price = vega / price
        slope = np.exp(log_s[idx] - 0.5 * d1 * d1 - _LOG_SQRT_2PI - lp)
        return lp - target[idx], slope

    lo = VOL_LO * sqrt_tau
    hi = VOL_HI * sqrt_tau
    g_hi, _ = g_and_slope(hi)
    # the upper end of the search interval is widened for deep out-of-the-money
    # states close to expiry
    while np.any(g_hi < 0.0):
        grow = g_hi < 0.0
        if np.any(hi[grow] >= VOL_HI_MAX * sqrt_tau[grow]):
            bad = np.flatnonzero(grow & (hi >= VOL_HI_MAX * sqrt_tau))
            i = bad[0]
            raise NoBracket(f"no implied vol bracket at t={params.maturity - tau_l[i]!r}, s={s_l[i]!r}")
        hi = np.where(grow, hi * 2.0, hi)
        g_hi, _ = g_and_slope(hi)

    if guess is None:
        sd = params.sigma * sqrt_tau * 1.05
    else:
        g0 = np.broadcast_to(np.asarray(guess, dtype=float), live.shape)[live]
        sd = np.where(g0 > 0.0, g0, params.sigma * 1.05) * sqrt_tau
    sd = np.clip(sd, lo, hi)
    active = np.ones(sd.size, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = sd[idx]
        g, slope = g_and_slope(x, idx)
        below = g < 0.0
        lo[idx] = np.where(below, x, lo[idx])
        hi[idx] = np.where(below, hi[idx], x)
        step = g / slope
        x_new = x - step
        outside = ~np.isfinite(x_new) | (x_new < lo[idx]) | (x_new > hi[idx])
        x_new = np.where(outside, 0.5 * (lo[idx] + hi[idx]), x_new)
        solved = np.abs(g) <= tol
        sd[idx] = np.where(solved, x, x_new)
        # the bracket may collapse onto a root Newton keeps stepping around
        done = solved | (np.abs(x_new - x) <= 1e-14 * x) | (hi[idx] - lo[idx] <= 4e-15 * x)
        active[idx[done]] = False
    out[live] = sd / sqrt_tau
    return _out(out.reshape(shape))


def implied_vol_slope(t, s, params: ModelParams, rel_bump: float = 1e-4):
    """Central finite difference of the implied vol in spot."""
    s = np.asarray(s, dtype=float)
    ds = rel_bump * s
    up = implied_vol(t, s + ds, params)
    dn = implied_vol(t, s - ds, params)
    return _out((np.asarray(up) - np.asarray(dn)) / (2.0 * ds))


# --- replication ----------------------------------------------------------

@dataclass(frozen=True)
class HedgeRatios:
    """Units of stock (``zeta``) and of vanilla put (``eta``) replicating the
    vulnerable put in the fair model."""

    zeta: np.ndarray | float
    eta: np.ndarray | float

    @property
    def near_singular(self):
        return _out(np.abs(np.asarray(self.zeta)) > 1e6)


def replication_ratios(t, s, params: ModelParams) -> HedgeRatios:
    tau = _time_to_expiry(t, params)
    s = np.asarray(s, dtype=float)
    if np.any(tau <= 0.0) or np.any(s <= 0.0):
        raise ValueError("replication ratios require t < T and s > 0")
    dp, dm = _dpm(tau, s, params.lam, params.sigma, params.strike)
    denom = norm_cdf(dm)  # 1 - N(-d_-)
    zeta = -norm_cdf(-dp) / denom
    eta = -norm_cdf(-dm) / denom
    return HedgeRatios(_out(zeta), _out(eta))
