import csv
import filecmp
import math
import os

import pytest

from darwinrisk import analytics, cli


def _summary(out):
    with open(os.path.join(out, "summary.csv")) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# darwinrisk-csv v1 summary")
    return {r["quantity"]: r for r in csv.DictReader(lines[1:])}


def test_static_analytic_defaults(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["--scenario", "static-analytic", "--out", str(out)]) == 0
    rows = _summary(out)
    assert float(rows["hva_0"]["value"]) == pytest.approx(0.0951626, abs=1e-7)
    assert float(rows["kva_0"]["value"]) == pytest.approx(math.exp(-0.1) * -math.expm1(-0.9), abs=1e-15)
    assert float(rows["kva_over_hva"]["value"]) == pytest.approx(5.6425, abs=1e-4)
    assert rows["kva_0"]["stderr"] == "exact"
    assert "kva_0" in capsys.readouterr().out
    assert (out / "config.resolved.txt").exists()


def test_config_echo_and_overrides(tmp_path):
    conf = tmp_path / "base.conf"
    text = "# base case\nmodel.lambda = 0.02   # doubled\ncapital.alpha_limit = yes\n"
    conf.write_text(text)
    out = tmp_path / "o"
    assert cli.main(["--scenario", "static-analytic", "--config", str(conf), "--out", str(out), "--seed", "5"]) == 0
    assert (out / "config.txt").read_text() == text
    resolved = (out / "config.resolved.txt").read_text()
    assert "model.lambda = 0.02" in resolved and "run.seed = 5" in resolved


@pytest.mark.parametrize("text", [
    "model.sigma = -1\n",
    "nonsense.key = 3\n",
    "model.sigma 0.3\n",
    "run.paths = many\n",
    "frictions.exit_cost = maybe\n",
    "hedge.steps = 125\n",
    "regress.family = forest\n",
    "capital.alpha = 1.5\n",
])
def test_config_errors_exit_2(tmp_path, text, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text(text)
    assert cli.main(["--scenario", "static-analytic", "--config", str(conf), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_paths(tmp_path):
    assert cli.main(["--scenario", "static-analytic", "--config", str(tmp_path / "none")]) == 2
    assert cli.main(["--scenario", "static-mc", "--paths", "10", "--out", str(tmp_path / "o")]) == 2


def test_unknown_scenario_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--scenario", "nope"])
    assert exc.value.code == 2


def test_invariant_and_numeric_exit_codes(tmp_path, monkeypatch):
    def broken(cfg, out):
        raise cli.InvariantFailure("loss drifts")

    def no_root(cfg, out):
        raise analytics.NoBracket("no bracket")

    monkeypatch.setitem(cli.RUNNERS, "static-analytic", broken)
    assert cli.main(["--scenario", "static-analytic", "--out", str(tmp_path / "a")]) == 3
    monkeypatch.setitem(cli.RUNNERS, "static-analytic", no_root)
    assert cli.main(["--scenario", "static-analytic", "--out", str(tmp_path / "b")]) == 4


def test_lambda_sweep_csv(tmp_path):
    conf = tmp_path / "s.conf"
    conf.write_text("sweep.lambdas = 0.005, 0.01, 0.02\n")
    out = tmp_path / "o"
    assert cli.main(["--scenario", "lambda-sweep", "--config", str(conf), "--out", str(out)]) == 0
    lines = (out / "lambda_sweep.csv").read_text().splitlines()
    assert lines[0] == "# darwinrisk-csv v1 lambda-sweep"
    assert len(lines) == 5


def test_static_mc_small(tmp_path):
    conf = tmp_path / "s.conf"
    conf.write_text("capital.alpha = 0.995\ncapital.bootstrap = 20\n")
    out = tmp_path / "o"
    assert cli.main(["--scenario", "static-mc", "--config", str(conf), "--paths", "5000", "--out", str(out)]) == 0
    rows = _summary(out)
    assert float(rows["ec_0_mc"]["value"]) == pytest.approx(float(rows["ec_0_closed"]["value"]), abs=1e-12)


def test_rerun_is_byte_identical(tmp_path):
    args = ["--scenario", "delta-frictions", "--paths", "2000"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
