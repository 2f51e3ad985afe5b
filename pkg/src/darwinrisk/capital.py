"""Trading-loss process, economic capital (expected shortfall of the one-year
loss increment) and KVA for the vulnerable put.

Conditional quantities on the coarse capital grid are learned on *restarted*
one-year intervals: each path is taken alive at t_i with its auxiliary spot and
given a fresh exponential ruin delay. The Markov structure makes this the law
of the loss increment given ``S_{t_i} = S > 0``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import analytics, regress
from .core import Z95, Estimate, ModelParams, TimeGrid
from .frictions import FrictionConfig, PathwiseHvaF, hva_f_pathwise, live_cost_increments
from .hva import DealSeries, HedgeScheme, hedge_deltas, hva_closed_form
from .model import PathBatch

CSV_VERSION = "darwinrisk-csv v1"


@dataclass(frozen=True)
class CapitalParams:
    alpha: float = 0.99
    hurdle: float = 0.10
    horizon: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("alpha must be in (1/2, 1)")
        if not self.hurdle >= 0.0:
            raise ValueError("hurdle rate must be >= 0")
        if not self.horizon > 0.0:
            raise ValueError("horizon must be > 0")


@dataclass(frozen=True)
class LossSeries:
    grid: TimeGrid
    loss: np.ndarray

    def increments(self):
        return np.diff(self.loss, axis=-1)


# --- closed forms for the static hedge -----------------------------------

def static_theta(cp: CapitalParams, params: ModelParams, limit: bool = False) -> float:
    """Last date with tail risk at level alpha: ``(T + ln(alpha)/lam)^+``."""
    log_alpha = -params.lam if limit else math.log(cp.alpha)
    return max(params.maturity + log_alpha / params.lam, 0.0)


def static_has_tail(cp: CapitalParams, params: ModelParams, limit: bool = False) -> bool:
    # in the limit alpha -> e^{-lam} from below the strict inequality holds
    return True if limit else params.lam > -math.log(cp.alpha)


def ec_kva_static_closed_form(t, pre_ruin, cp: CapitalParams, params: ModelParams, limit: bool = False):
    """EC and KVA of the statically hedged position.

    ``limit=True`` evaluates the limit alpha -> e^{-lam} from below, where
    the ruin probability over one year just exceeds ``1 - alpha``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t > params.maturity):
        raise ValueError("t must be <= T")
    theta = static_theta(cp, params, limit)
    on = static_has_tail(cp, params, limit) & np.asarray(pre_ruin, dtype=bool) & (t < theta)
    base = params.strike * np.exp(-params.lam * (params.maturity - t))
    ec = np.where(on, base, 0.0)
    kva = np.where(on, base * -np.expm1(-cp.hurdle * (theta - t)), 0.0)
    if ec.ndim == 0:
        return float(ec), float(kva)
    return ec, kva


def ava(hva_0: float, kva_0: float, baseline_hva_f_0: float = 0.0, baseline_kva_0: float = 0.0) -> float:
    """Additional valuation adjustment over a fair-model hedging baseline."""
    return hva_0 + kva_0 - (baseline_hva_f_0 + baseline_kva_0)


def lambda_sweep(lams, params: ModelParams, cp: CapitalParams):
    """Static-hedge ratios at alpha -> e^{-lam} for each intensity."""
    rows = []
    for lam in lams:
        p = params.replace(lam=float(lam))
        hva0 = hva_closed_form(0.0, True, p)
        q0 = analytics.jr_vulnerable_put_price(0.0, p.s0, True, p)
        _, kva0 = ec_kva_static_closed_form(0.0, True, cp, p, limit=True)
        rows.append((float(lam), hva0, q0, kva0, hva0 / q0, kva0 / hva0, ava(hva0, kva0) / q0))
    return rows


LAMBDA_SWEEP_HEADER = ("lambda", "hva_0", "q_0", "kva_0", "hva_over_q", "kva_over_hva", "ava_over_q")


# --- empirical VaR / ES ---------------------------------------------------

@dataclass(frozen=True)
class TailEstimate:
    var: Estimate
    es: Estimate
    exceedances: int
    degenerate_tail: bool


def _silverman_density(x, at):
    n = x.size
    sd = x.std()
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    if spread <= 0.0:
        return math.inf
    bw = 0.9 * spread * n ** -0.2
    u = (at - x) / bw
    return float(np.mean(np.exp(-0.5 * u * u)) / (bw * math.sqrt(2.0 * math.pi)))


def empirical_var_es(samples, alpha: float):
    """Lower empirical quantile and the mean of samples at or above it."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    k = math.ceil(alpha * x.size)  # 1-based order statistic
    var = x[k - 1]
    tail = x[x >= var]
    # mean of the excess keeps a constant sample exact
    return float(var), float(var + (tail - var).mean()), tail


def var_es_unconditional(samples, cp: CapitalParams) -> TailEstimate:
    """Empirical VaR and ES with central-limit intervals.

    The VaR interval uses a Gaussian-kernel density at the quantile; the ES
    interval uses the asymptotic variance ``Var((X - VaR)^+) / (1 - alpha)^2``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 1000:
        raise ValueError("need at least 1000 samples")
    a = cp.alpha
    var, es, tail = empirical_var_es(x, a)
    m = x.size
    dens = _silverman_density(x, var)
    var_se = math.sqrt(a * (1 - a) / m) / dens if dens > 0 else math.inf
    es_se = float(np.std(np.maximum(x - var, 0.0), ddof=1) / ((1 - a) * math.sqrt(m)))
    var_est = Estimate(var, var_se, var - Z95 * var_se, var + Z95 * var_se, m)
    es_est = Estimate(es, es_se, es - Z95 * es_se, es + Z95 * es_se, m)
    n_exc = int(np.count_nonzero(x > var))
    return TailEstimate(var_est, es_est, n_exc, n_exc < 30)


def bootstrap_es_se(samples, alpha: float, reps: int = 200, seed: int = 0) -> float:
    """Bootstrap standard error of the empirical ES (valid with atoms in the law)."""
    x = np.asarray(samples, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    vals = np.empty(reps)
    for b in range(reps):
        vals[b] = empirical_var_es(x[rng.integers(0, x.size, x.size)], alpha)[1]
    return float(vals.std(ddof=1))


# --- loss increments on the capital grid ------------------------------------

@dataclass
class IntervalData:
    """Loss ingredients per capital interval (paths, intervals).

    ``deal``/``costs``/``alive_next`` are for paths restarted alive at t_i;
    the ``g_`` arrays use the genuine ruin time and are only meaningful where
    ``g_alive[:, i]`` holds.
    """

    times: np.ndarray
    states: np.ndarray
    alive_next: np.ndarray
    deal: np.ndarray
    costs: np.ndarray
    g_alive: np.ndarray
    g_deal: np.ndarray
    g_costs: np.ndarray

    @property
    def intervals(self):
        return self.times.size - 1


def _interval_pieces(hedge: TimeGrid, cols, bs_spot, live_delta, cost_inc, ruin_at, params, scheme):
    """Deal and cost increments over every capital interval for a given ruin clock."""
    m = bs_spot.shape[0]
    c = cols.size - 1
    times = hedge.times
    deal = np.zeros((m, c))
    costs = np.zeros((m, c))
    alive_b = np.zeros((m, c), dtype=bool)
    for i in range(c):
        a, b = cols[i], cols[i + 1]
        r = ruin_at[:, i][:, None]
        alive = times[None, a:b + 1] < r
        ta, tb = times[a], times[b]
        jb = alive[:, -1]
        alive_b[:, i] = jb
        hva_a = hva_closed_form(ta, True, params)
        hva_b = np.where(jb, hva_closed_form(tb, True, params), 0.0)
        if scheme.kind == "static":
            deal[:, i] = np.where(jb, 0.0, params.strike) + hva_b - hva_a
        else:
            s = np.where(alive, bs_spot[:, a:b + 1], 0.0)
            d = np.where(alive, live_delta[:, a:b + 1], 0.0)
            gain = np.sum(d[:, :-1] * np.diff(s, axis=1), axis=1)
            mark_a = analytics.jr_vanilla_put_price(ta, bs_spot[:, a], params)
            mark_b = np.where(jb, analytics.jr_vanilla_put_price(tb, bs_spot[:, b], params), 0.0)
            deal[:, i] = -(mark_b - mark_a - gain) + hva_b - hva_a
        if cost_inc is not None:
            costs[:, i] = np.sum(np.where(alive[:, 1:], cost_inc[:, a + 1:b + 1], 0.0), axis=1)
    return deal, costs, alive_b


def build_intervals(batch: PathBatch, capital: TimeGrid, params: ModelParams, scheme: HedgeScheme,
                    fcfg: FrictionConfig | None = None) -> IntervalData:
    """Loss ingredients on ``capital`` from paths simulated on a finer hedge grid.

    ``batch`` must carry one restart delay per capital interval.
    """
    hedge = batch.grid
    cols = hedge.index_of(capital)
    c = capital.steps
    if batch.delays.shape[1] < c:
        raise ValueError(f"batch has {batch.delays.shape[1]} ruin clocks, {c} intervals need as many")
    if scheme.kind == "delta":
        if batch.bs_vol is None:
            raise ValueError("delta hedging needs implied vols")
        live = np.ones(batch.bs_spot.shape, dtype=bool)
        live_delta = hedge_deltas(hedge, batch.bs_spot, batch.bs_vol, live, params)
    else:
        live_delta = None
    cost_inc = None
    if fcfg is not None and fcfg.k > 0.0:
        if scheme.kind != "delta":
            raise ValueError("frictions only apply to the delta hedge")
        cost_inc = live_cost_increments(hedge, batch.bs_spot, batch.bs_vol, fcfg, params)
    t_start = capital.times[:-1][None, :]
    restart = t_start + batch.delays[:, :c]
    genuine = np.repeat(batch.ruin_time[:, None], c, axis=1)
    deal, costs, alive_next = _interval_pieces(hedge, cols, batch.bs_spot, live_delta, cost_inc,
                                               restart, params, scheme)
    g_deal, g_costs, _ = _interval_pieces(hedge, cols, batch.bs_spot, live_delta, cost_inc,
                                          genuine, params, scheme)
    g_alive = capital.times[None, :] < batch.ruin_time[:, None]
    states = batch.bs_spot[:, cols]
    return IntervalData(capital.times.copy(), states, alive_next, deal, costs, g_alive, g_deal, g_costs)


def loss_increments(data: IntervalData, hva_f: PathwiseHvaF | None = None, genuine: bool = False):
    """One-year loss increments ``L_{t_{i+1}} - L_{t_i}`` per path and interval."""
    c = data.intervals
    if genuine:
        deal, costs = data.g_deal, data.g_costs
        nxt_alive = data.g_alive[:, 1:]
    else:
        deal, costs = data.deal, data.costs
        nxt_alive = data.alive_next
    inc = deal + costs
    if hva_f is not None:
        for i in range(c):
            nxt = hva_f(i + 1, np.where(nxt_alive[:, i], data.states[:, i + 1], 0.0))
            inc[:, i] += nxt - hva_f(i, data.states[:, i])
    if genuine:
        inc = np.where(data.g_alive[:, :-1], inc, 0.0)
    return inc


def genuine_loss(data: IntervalData, hva_f: PathwiseHvaF | None = None) -> LossSeries:
    inc = loss_increments(data, hva_f, genuine=True)
    loss = np.zeros((inc.shape[0], inc.shape[1] + 1))
    loss[:, 1:] = np.cumsum(inc, axis=1)
    return LossSeries(TimeGrid(data.times), loss)


def assemble_loss(deal: DealSeries, capital: TimeGrid, frictions=None, hva_f: PathwiseHvaF | None = None,
                  states=None) -> LossSeries:
    """``L = -pnl + (HVA - HVA_0) + f + (HVA^f - HVA^f_0)`` sampled on ``capital``.

    ``frictions`` is a FrictionSeries on the deal grid; ``states`` the auxiliary
    spots on ``capital`` (needed with ``hva_f``).
    """
    cols = deal.grid.index_of(capital)
    comp = np.atleast_2d(deal.compensated)[:, cols]
    loss = comp.copy()
    if frictions is not None:
        if frictions.grid != deal.grid:
            raise ValueError("friction and deal series live on different grids")
        loss += np.atleast_2d(frictions.f_cum)[:, cols]
    if hva_f is not None:
        if states is None:
            raise ValueError("states are required to evaluate the friction HVA")
        alive = np.atleast_2d(deal.hva)[:, cols] > 0.0
        alive[:, 0] = True
        vals = hva_f.path_values(np.atleast_2d(states), alive)
        loss += vals - vals[:, :1]
    return LossSeries(capital, loss)


# --- regression-based EC and KVA ----------------------------------------

@dataclass
class KvaCurve:
    times: np.ndarray
    var_regs: list
    ec_regs: list
    kva_regs: list
    var0: Estimate | None = None
    ec0: Estimate | None = None
    kva0: Estimate | None = None
    tail0: TailEstimate | None = None
    extras: dict = field(default_factory=dict)

    def _eval(self, regs, i, s):
        s = np.asarray(s, dtype=float)
        if i >= len(regs) or regs[i] is None:
            return np.zeros(s.shape)
        return np.where(s > 0.0, regs[i](np.where(s > 0.0, s, 1.0)), 0.0)

    def var(self, i, s):
        return self._eval(self.var_regs, i, s)

    def ec(self, i, s):
        return self._eval(self.ec_regs, i, s)

    def kva(self, i, s):
        return self._eval(self.kva_regs, i, s)


def train_var_es(states, increments, cp: CapitalParams, spec=regress.ApproximatorSpec(),
                 cfg=regress.TrainConfig()):
    """Two-stage VaR then ES regressions at dates 1..C-1 (date 0 is unconditional)."""
    c = increments.shape[1]
    var_regs = [None] * c
    ec_regs = [None] * c
    for i in range(1, c):
        x, y = states[:, i], increments[:, i]
        var_regs[i] = regress.fit_quantile(x, y, cp.alpha, spec, cfg)
        ec_regs[i] = regress.fit_es(x, y, cp.alpha, var_regs[i], spec, cfg)
    return var_regs, ec_regs


def kva_dynamic(times, states, alive_next, ec_fn, cp: CapitalParams, spec=regress.ApproximatorSpec(),
                cfg=regress.TrainConfig()):
    """Backward KVA recursion with the one-step quadrature of ``r (EC - KVA)^+``.

    ``ec_fn(i, s)`` evaluates EC at date i (0 on absorbed states and at T).
    Returns per-date regressors and the time-0 estimate.
    """
    times = np.asarray(times, dtype=float)
    c = times.size - 1
    regs = [None] * c
    kva_next = lambda s: np.zeros(np.shape(s))  # noqa: E731  KVA(T, .) = 0
    y = None
    for i in range(c - 1, -1, -1):
        dt = times[i + 1] - times[i]
        s_next = np.where(alive_next[:, i], states[:, i + 1], 0.0)
        k_next = np.where(alive_next[:, i], kva_next(s_next), 0.0)
        ec_next = ec_fn(i + 1, s_next) if i + 1 < c else np.zeros(s_next.shape)
        y = cp.hurdle * dt * np.maximum(ec_next - k_next, 0.0) + k_next
        if i == 0:
            break
        if np.all(y == y[0]):
            # constant target, nothing to learn
            const = float(y[0])
            regs[i] = _Const(const)
        else:
            regs[i] = regress.fit_mean(states[:, i], y, spec, cfg)
        reg = regs[i]
        kva_next = lambda s, reg=reg: np.where(np.asarray(s) > 0.0, reg(np.where(np.asarray(s) > 0.0, s, 1.0)), 0.0)  # noqa: E731
    return regs, Estimate.from_samples(y)


class _Const:
    def __init__(self, value):
        self.value = value

    def __call__(self, s):
        return np.full(np.shape(s), self.value)


@dataclass
class DynamicResult:
    hva_d0: float
    hva_f: PathwiseHvaF | None
    curve: KvaCurve
    data: IntervalData

    @property
    def hva_f0(self) -> Estimate:
        return self.hva_f.estimate0 if self.hva_f is not None else Estimate.exact(0.0)

    @property
    def hva0(self) -> float:
        return self.hva_d0 + self.hva_f0.value

    @property
    def kva_over_hva(self) -> float:
        return self.curve.kva0.value / self.hva0


def dynamic_capital(data: IntervalData, params: ModelParams, cp: CapitalParams, frictions: bool,
                    spec=regress.ApproximatorSpec(), cfg=regress.TrainConfig()) -> DynamicResult:
    """HVA^f, VaR/EC and KVA by backward regressions on restarted intervals."""
    hva_f = None
    if frictions:
        hva_f = hva_f_pathwise(data.times, data.states, data.costs, data.alive_next, spec, cfg)
    inc = loss_increments(data, hva_f)
    var_regs, ec_regs = train_var_es(data.states, inc, cp, spec, cfg)
    tail0 = var_es_unconditional(inc[:, 0], cp)
    curve = KvaCurve(data.times, var_regs, ec_regs, [], tail0.var, tail0.es, None, tail0)
    kva_regs, kva0 = kva_dynamic(data.times, data.states, data.alive_next, curve.ec, cp, spec, cfg)
    curve.kva_regs = kva_regs
    curve.kva0 = kva0
    return DynamicResult(hva_closed_form(0.0, True, params), hva_f, curve, data)


# --- static hedge by simulation ---------------------------------------------

@dataclass
class StaticMcResult:
    ec: np.ndarray
    kva: np.ndarray
    ec0: Estimate
    kva0: Estimate


def _static_dp(inc, alive_next, times, alpha, hurdle):
    c = times.size - 1
    ec = np.array([empirical_var_es(inc[:, i], alpha)[1] for i in range(c)] + [0.0])
    kva = np.zeros(c + 1)
    y0 = None
    for i in range(c - 1, -1, -1):
        dt = times[i + 1] - times[i]
        y = np.where(alive_next[:, i], hurdle * dt * max(ec[i + 1] - kva[i + 1], 0.0) + kva[i + 1], 0.0)
        kva[i] = y.mean()
        y0 = y
    return ec, kva, y0


def static_capital_mc(data: IntervalData, cp: CapitalParams, bootstrap: int = 0, seed: int = 0) -> StaticMcResult:
    """EC per date by empirical ES of restarted increments, KVA by the same recursion.

    With ``bootstrap > 0`` the standard errors are bootstrap standard deviations
    of the whole estimator (EC quantile step included) instead of sample SEs.
    """
    inc = loss_increments(data)
    ec, kva, y0 = _static_dp(inc, data.alive_next, data.times, cp.alpha, cp.hurdle)
    tail = var_es_unconditional(inc[:, 0], cp)
    ec0, kva0 = tail.es, Estimate.from_samples(y0)
    if bootstrap:
        rng = np.random.default_rng(seed)
        m = inc.shape[0]
        ecs, kvas = np.empty(bootstrap), np.empty(bootstrap)
        for b in range(bootstrap):
            idx = rng.integers(0, m, m)
            e, k, _ = _static_dp(inc[idx], data.alive_next[idx], data.times, cp.alpha, cp.hurdle)
            ecs[b], kvas[b] = e[0], k[0]
        se_e, se_k = float(ecs.std(ddof=1)), float(kvas.std(ddof=1))
        ec0 = Estimate(ec[0], se_e, ec[0] - Z95 * se_e, ec[0] + Z95 * se_e, m)
        kva0 = Estimate(kva[0], se_k, kva[0] - Z95 * se_k, kva[0] + Z95 * se_k, m)
    return StaticMcResult(ec, kva, ec0, kva0)


# --- CSV helpers ---------------------------------------------------------

TERM_HEADER = ("t", "mean", "q10", "q90", "q025", "q975")


def term_structure(times, values, alive):
    """Rows of mean and quantiles of ``J_t * Z(t, S_t)`` per date."""
    rows = []
    for i, t in enumerate(times):
        v = np.where(alive[:, i], values[:, i], 0.0)
        q = np.quantile(v, [0.10, 0.90, 0.025, 0.975])
        rows.append((float(t), float(v.mean()), *map(float, q)))
    return rows


def write_csv(path, header, rows, kind: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} {kind}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, str) else repr(float(x)) if isinstance(x, float) else x for x in r])
