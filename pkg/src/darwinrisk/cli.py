"""Scenario runner: ``darwinrisk --scenario NAME [--config FILE] [--out DIR]``.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Unknown
keys and malformed values are config errors (exit 2). A failed sanity check
exits 3, a numerical failure (solver bracket, regression divergence) exits 4.
"""

from __future__ import annotations

import argparse
import math
import os
import shutil
import sys
from dataclasses import dataclass, field

import numpy as np

from . import analytics, capital, frictions, regress
from .core import Estimate, ModelParams, TimeGrid
from .hva import HedgeScheme, delta_deal_series, hva_closed_form
from .model import RngPolicy, simulate_paths

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 2, 3, 4

SCENARIOS = ("static-analytic", "static-mc", "delta-frictionless", "delta-frictions", "convergence",
             "lambda-sweep", "loss-histogram", "term-structures")


class ConfigError(ValueError):
    pass


class InvariantFailure(RuntimeError):
    pass


def _bool(v):
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v):
    return tuple(float(x) for x in v.split(",") if x.strip())


# key -> (parser, default)
KEYS = {
    "model.s0": (float, 1.0),
    "model.strike": (float, 1.0),
    "model.maturity": (float, 10.0),
    "model.sigma": (float, 0.3),
    "model.lambda": (float, 0.01),
    "hedge.kind": (str, "delta"),
    "hedge.steps": (int, 120),
    "frictions.k": (float, 0.1),
    "frictions.exit_cost": (_bool, True),
    "frictions.entry_cost": (_bool, False),
    "capital.alpha": (float, 0.99),
    "capital.hurdle": (float, 0.10),
    "capital.steps": (int, 10),
    "capital.alpha_limit": (_bool, True),
    "capital.bootstrap": (int, 1000),
    "run.paths": (int, 50_000),
    "run.seed": (int, 2024),
    "run.workers": (int, 1),
    "run.chunk": (int, 10_000),
    "regress.family": (str, "poly"),
    "regress.degree": (int, 6),
    "regress.hidden": (_ints, (10, 10, 10)),
    "regress.epochs": (int, 200),
    "regress.batch": (int, 512),
    "regress.lr": (float, 3e-3),
    "regress.seed": (int, 0),
    "regress.dump": (_bool, False),
    "convergence.levels": (_ints, frictions.CONVERGENCE_LEVELS),
    "sweep.lambdas": (_floats, tuple(round(0.0025 * i, 4) for i in range(1, 41))),
    "histogram.bins": (int, 50),
}


@dataclass
class ScenarioConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})
    source_text: str = ""

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "ScenarioConfig":
        cfg = cls(source_text=text)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value, f"{origin}:{lineno}")
        return cfg

    def set(self, key, value, where="<override>"):
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        conv = KEYS[key][0]
        try:
            self.values[key] = conv(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        lines = []
        for k in KEYS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    # typed views -------------------------------------------------------
    def model(self) -> ModelParams:
        try:
            return ModelParams(self["model.s0"], self["model.strike"], self["model.maturity"],
                               self["model.sigma"], self["model.lambda"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def capital(self) -> capital.CapitalParams:
        try:
            return capital.CapitalParams(self["capital.alpha"], self["capital.hurdle"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def friction(self, k=None) -> frictions.FrictionConfig:
        try:
            return frictions.FrictionConfig(self["frictions.k"] if k is None else k, self["hedge.steps"],
                                            self["frictions.exit_cost"], self["frictions.entry_cost"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def spec(self):
        try:
            return (regress.ApproximatorSpec(self["regress.family"], self["regress.degree"], self["regress.hidden"]),
                    regress.TrainConfig(self["regress.epochs"], self["regress.batch"], self["regress.lr"],
                                        seed=self["regress.seed"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self):
        self.model()
        self.capital()
        self.friction()
        self.spec()
        if self["hedge.kind"] not in ("static", "delta"):
            raise ConfigError(f"hedge.kind must be static or delta, got {self['hedge.kind']!r}")
        if self["hedge.steps"] % self["capital.steps"]:
            raise ConfigError("hedge.steps must be a multiple of capital.steps")
        if self["run.paths"] < 1000:
            raise ConfigError("run.paths must be >= 1000")
        if self["run.chunk"] < 1 or self["run.workers"] < 1:
            raise ConfigError("run.chunk and run.workers must be >= 1")


# --- output -----------------------------------------------------------------

SUMMARY_HEADER = ("quantity", "value", "stderr", "ci_lo", "ci_hi")


def _fmt(x):
    if isinstance(x, str):
        return x
    return repr(float(x))


class Summary:
    def __init__(self):
        self.rows = []

    def add(self, name, est):
        if not isinstance(est, Estimate):
            est = Estimate.exact(est)
        self.rows.append((name, *est.row()))

    def write(self, path, scenario):
        capital.write_csv(path, SUMMARY_HEADER, [tuple(_fmt(x) for x in r) for r in self.rows],
                          f"summary {scenario}")

    def text(self):
        out = []
        for name, v, se, lo, hi in self.rows:
            if se == "exact":
                out.append(f"{name:>16} = {v:.6g} (exact)")
            else:
                out.append(f"{name:>16} = {v:.6g}  se {se:.3g}  95% [{lo:.6g}, {hi:.6g}]")
        return "\n".join(out)


def _check(cond, msg):
    if not cond:
        raise InvariantFailure(msg)


def _grids(cfg, params):
    hedge = TimeGrid.uniform(params.maturity, cfg["hedge.steps"])
    cap = TimeGrid.uniform(params.maturity, cfg["capital.steps"])
    return hedge, cap


def _simulate(cfg, params, grid, restarts, with_vol=True):
    return simulate_paths(params, grid, RngPolicy(cfg["run.seed"]), cfg["run.paths"], restarts=restarts,
                          with_vol=with_vol, workers=cfg["run.workers"], chunk=cfg["run.chunk"])


def _martingale_check(loss: capital.LossSeries, z_max=5.0):
    _check(np.all(loss.loss[:, 0] == 0.0), "loss does not start at 0")
    mean = loss.loss.mean(axis=0)
    se = loss.loss.std(axis=0, ddof=1) / math.sqrt(loss.loss.shape[0])
    z = np.where(se > 0, np.abs(mean) / np.where(se > 0, se, 1.0), 0.0)
    _check(np.all(z < z_max), f"loss process mean drifts: max |z| = {z.max():.2f}")


# --- scenarios ------------------------------------------------------------

def run_static_analytic(cfg, out):
    p, cp = cfg.model(), cfg.capital()
    limit = cfg["capital.alpha_limit"]
    s = Summary()
    hva0 = hva_closed_form(0.0, True, p)
    ec0, kva0 = capital.ec_kva_static_closed_form(0.0, True, cp, p, limit=limit)
    ec_a, kva_a = capital.ec_kva_static_closed_form(0.0, True, cp, p, limit=False)
    _check(0.0 <= kva0 <= ec0 + 1e-15, "static KVA exceeds EC")
    s.add("hva_d_0", hva0)
    s.add("hva_0", hva0)
    s.add("ec_0", ec0)
    s.add("kva_0", kva0)
    s.add("kva_over_hva", kva0 / hva0)
    s.add("ava_0", capital.ava(hva0, kva0))
    s.add("ec_0_at_alpha", ec_a)
    s.add("kva_0_at_alpha", kva_a)
    s.add("q_0", analytics.jr_vulnerable_put_price(0.0, p.s0, True, p))
    return s


def run_static_mc(cfg, out):
    p, cp = cfg.model(), cfg.capital()
    _, cap = _grids(cfg, p)
    batch = _simulate(cfg, p, cap, cap.steps, with_vol=False)
    data = capital.build_intervals(batch, cap, p, HedgeScheme.static())
    _martingale_check(capital.genuine_loss(data))
    res = capital.static_capital_mc(data, cp, bootstrap=cfg["capital.bootstrap"], seed=cfg["run.seed"])
    ec_cf, kva_cf = capital.ec_kva_static_closed_form(0.0, True, cp, p)
    s = Summary()
    s.add("hva_0", hva_closed_form(0.0, True, p))
    s.add("ec_0_mc", res.ec0)
    s.add("kva_0_mc", res.kva0)
    s.add("ec_0_closed", ec_cf)
    s.add("kva_0_closed", kva_cf)
    rows = [(float(t), float(e), float(k)) for t, e, k in zip(cap.times, res.ec, res.kva)]
    capital.write_csv(os.path.join(out, "static_mc_dates.csv"), ("t", "ec", "kva"), rows, "static-mc")
    return s


def _dynamic(cfg, with_frictions):
    p, cp = cfg.model(), cfg.capital()
    hedge, cap = _grids(cfg, p)
    batch = _simulate(cfg, p, hedge, cap.steps)
    fcfg = cfg.friction() if with_frictions else None
    scheme = HedgeScheme("delta", hedge.steps, fcfg.k if fcfg else 0.0)
    data = capital.build_intervals(batch, cap, p, scheme, fcfg)
    spec, tcfg = cfg.spec()
    res = capital.dynamic_capital(data, p, cp, with_frictions and fcfg.k > 0.0, spec, tcfg)
    return p, cp, cap, batch, res


def _shifted(est: Estimate, scale=1.0, shift=0.0):
    if est.is_exact:
        return Estimate.exact(est.value * scale + shift)
    return Estimate(est.value * scale + shift, est.stderr * scale, est.ci_lo * scale + shift,
                    est.ci_hi * scale + shift, est.n)


def _dynamic_summary(cfg, res):
    cv = res.curve
    s = Summary()
    hva0 = _shifted(res.hva_f0, shift=res.hva_d0)
    s.add("hva_d_0", res.hva_d0)
    s.add("hva_f_0", res.hva_f0)
    s.add("hva_0", hva0)
    s.add("var_0", cv.var0)
    s.add("ec_0", cv.ec0)
    s.add("kva_0", cv.kva0)
    # delta method, the HVA error is an order below the KVA one
    s.add("kva_over_hva", _shifted(cv.kva0, 1.0 / hva0.value))
    s.add("ava_0", _shifted(cv.kva0, shift=hva0.value))
    return s


def _dump_regressors(cfg, res, out):
    if not cfg["regress.dump"]:
        return
    d = os.path.join(out, "regressors")
    os.makedirs(d, exist_ok=True)
    groups = [("var", res.curve.var_regs), ("ec", res.curve.ec_regs), ("kva", res.curve.kva_regs)]
    if res.hva_f is not None:
        groups.append(("hvaf", res.hva_f.regressors))
    for name, regs in groups:
        for i, r in enumerate(regs):
            if isinstance(r, regress.Regressor):
                r.dump(os.path.join(d, f"{name}_{i:02d}"))


def _run_delta(cfg, out, with_frictions):
    _, cp, _, _, res = _dynamic(cfg, with_frictions)
    _martingale_check(capital.genuine_loss(res.data, res.hva_f))
    cv = res.curve
    _check(cv.kva0.value >= 0.0, "negative KVA_0")
    _check(all(math.isfinite(x) for x in (cv.var0.value, cv.ec0.value, cv.kva0.value)), "non-finite capital")
    _check(cv.ec0.value >= cv.var0.value, "EC_0 below VaR_0")
    _dump_regressors(cfg, res, out)
    return _dynamic_summary(cfg, res)


def run_convergence(cfg, out):
    p = cfg.model()
    rows, diffs = frictions.convergence_study(p, cfg["run.paths"], cfg["frictions.k"], cfg["run.seed"],
                                              cfg["convergence.levels"], cfg["frictions.exit_cost"],
                                              cfg["frictions.entry_cost"], chunk=min(cfg["run.chunk"], 5000),
                                              workers=cfg["run.workers"])
    frictions.write_convergence_csv(os.path.join(out, "convergence.csv"), rows, capital.CSV_VERSION)
    capital.write_csv(os.path.join(out, "convergence_diffs.csv"), ("n", "n_next", "diff", "stderr"),
                      [(a, b, float(d), float(se)) for a, b, d, se in diffs], "convergence-diffs")
    s = Summary()
    for n, h, v, se, lo, hi in rows:
        s.add(f"hva_h_n{n}", Estimate(v, se, lo, hi))
    return s


def run_lambda_sweep(cfg, out):
    p, cp = cfg.model(), cfg.capital()
    rows = capital.lambda_sweep(cfg["sweep.lambdas"], p, cp)
    for a, b in zip(rows[:-1], rows[1:]):
        _check(b[4] >= a[4] and b[6] >= a[6], "HVA/Q or AVA/Q not increasing in lambda")
    capital.write_csv(os.path.join(out, "lambda_sweep.csv"), capital.LAMBDA_SWEEP_HEADER, rows, "lambda-sweep")
    s = Summary()
    s.add("points", float(len(rows)))
    return s


def loss_histogram_samples(cfg):
    """Delta-hedge deal loss ``-pnl_1 + HVA_1 - HVA_0`` on paths ruined in (0, 1]."""
    p = cfg.model()
    hedge, cap = _grids(cfg, p)
    batch = _simulate(cfg, p, hedge, 0)
    one = int(hedge.index_of(cap)[1])
    deal = delta_deal_series(batch, p)
    hit = batch.ruin_time <= hedge.times[one]
    loss = deal.compensated[hit, one]
    static_const = p.strike + hva_closed_form(cap.times[1], False, p) - hva_closed_form(0.0, True, p)
    return loss, static_const, batch


def run_loss_histogram(cfg, out):
    loss, const, batch = loss_histogram_samples(cfg)
    _check(loss.size > 0, "no path ruined during the first year")
    counts, edges = np.histogram(loss, bins=cfg["histogram.bins"])
    width = np.diff(edges)
    dens = counts / (loss.size * width)
    rows = [(float(a), float(b), int(c), float(d)) for a, b, c, d in zip(edges[:-1], edges[1:], counts, dens)]
    capital.write_csv(os.path.join(out, "loss_histogram.csv"), ("bin_lo", "bin_hi", "count", "density"), rows,
                      "loss-histogram")
    s = Summary()
    s.add("conditioned_paths", float(loss.size))
    s.add("static_loss", const)
    s.add("delta_loss_mean", Estimate.from_samples(loss) if loss.size > 1 else float(loss.mean()))
    s.add("share_below_static", float(np.mean(loss < const)))
    return s


def run_term_structures(cfg, out):
    s = Summary()
    for tag, fr in (("frictionless", False), ("frictions", True)):
        p, cp, cap, batch, res = _dynamic(cfg, fr)
        d = res.data
        ec = np.zeros(d.states.shape)
        kva = np.zeros(d.states.shape)
        for i in range(cap.steps):
            ec[:, i] = res.curve.ec(i, d.states[:, i]) if i else res.curve.ec0.value
            kva[:, i] = res.curve.kva(i, d.states[:, i]) if i else res.curve.kva0.value
        capital.write_csv(os.path.join(out, f"ec_term_{tag}.csv"), capital.TERM_HEADER,
                          capital.term_structure(cap.times, ec, d.g_alive), f"ec-term {tag}")
        capital.write_csv(os.path.join(out, f"kva_term_{tag}.csv"), capital.TERM_HEADER,
                          capital.term_structure(cap.times, kva, d.g_alive), f"kva-term {tag}")
        s.add(f"kva_0_{tag}", res.curve.kva0)
    ec_s, kva_s = capital.ec_kva_static_closed_form(cap.times, np.ones(cap.times.size, bool), cp, p,
                                                   limit=cfg["capital.alpha_limit"])
    rows = [(float(t), float(e), float(k)) for t, e, k in zip(cap.times, ec_s, kva_s)]
    capital.write_csv(os.path.join(out, "static_term.csv"), ("t", "ec", "kva"), rows, "static-term")
    return s


RUNNERS = {
    "static-analytic": run_static_analytic,
    "static-mc": run_static_mc,
    "delta-frictionless": lambda cfg, out: _run_delta(cfg, out, False),
    "delta-frictions": lambda cfg, out: _run_delta(cfg, out, True),
    "convergence": run_convergence,
    "lambda-sweep": run_lambda_sweep,
    "loss-histogram": run_loss_histogram,
    "term-structures": run_term_structures,
}


def run(scenario: str, cfg: ScenarioConfig, out: str, config_path=None) -> Summary:
    if scenario not in RUNNERS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    cfg.validate()
    os.makedirs(out, exist_ok=True)
    if config_path is not None:
        shutil.copyfile(config_path, os.path.join(out, "config.txt"))
    with open(os.path.join(out, "config.resolved.txt"), "w") as fh:
        fh.write(cfg.to_text())
    with np.errstate(over="raise", invalid="raise", divide="ignore"):
        summary = RUNNERS[scenario](cfg, out)
    summary.write(os.path.join(out, "summary.csv"), scenario)
    return summary


def build_parser():
    ap = argparse.ArgumentParser(prog="darwinrisk", description="Darwinian model risk scenarios")
    ap.add_argument("--scenario", required=True, choices=SCENARIOS)
    ap.add_argument("--config", default=None, help="flat key = value file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    ap.add_argument("--paths", type=int, default=None, help="overrides run.paths")
    ap.add_argument("--regressor", choices=("mlp", "poly"), default=None, help="overrides regress.family")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            try:
                with open(args.config) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            cfg = ScenarioConfig.parse(text, args.config)
        else:
            cfg = ScenarioConfig()
        if args.seed is not None:
            cfg.set("run.seed", args.seed)
        if args.paths is not None:
            cfg.set("run.paths", args.paths)
        if args.regressor is not None:
            cfg.set("regress.family", args.regressor)
        summary = run(args.scenario, cfg, args.out, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (analytics.NoBracket, regress.RegressionError, FloatingPointError) as exc:
        print(f"numeric failure [{type(exc).__module__}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(summary.text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
