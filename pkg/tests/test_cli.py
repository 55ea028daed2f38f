import json

import numpy as np
import pytest

from cmimpute.analysis import fit_ancova
from cmimpute.cli import format_plan, main
from cmimpute.dataset import Strategy, write_csv
from cmimpute.inference import Pipeline, jackknife
from cmimpute.mmrm import MeanModelSpec
from cmimpute.simgen import SummaryTable

from conftest import make_dataset


def setup_analysis(tmp_path, d):
    data = tmp_path / "trial.csv"
    write_csv(data, d)
    cfg = tmp_path / "analysis.json"
    cfg.write_text(json.dumps({
        "data": {"visits": list(d.grid.labels), "baseline_label": d.grid.baseline_label,
                 "reference_group": "control"},
        "model": {"covariates": ["baseline"], "covariate_by_visit": ["baseline"]},
    }))
    return data, cfg


def test_analyze_complete_data_matches_raw_ancova(tmp_path, capsys):
    d = make_dataset(n=30, J=3, miss=0.0, seed=2)
    data, cfg = setup_analysis(tmp_path, d)
    out = tmp_path / "res"
    assert main(["analyze", "--data", str(data), "--config", str(cfg), "--strategy", "MAR", "--out", str(out)]) == 0
    res = json.loads((out / "analysis.json").read_text())
    row = res["results"][0]
    p = Pipeline(mean_spec=MeanModelSpec(covariates=("baseline",), covariate_by_visit=("baseline",)))
    assert row["difference"] == pytest.approx(fit_ancova(d, p.ancova).theta, abs=1e-9)
    assert row["se"] == pytest.approx(jackknife(d, p).se_jack, abs=1e-9)
    assert res["manifest"] == "manifest.json"
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["outputs"] == ["analysis.txt", "analysis.json"]
    assert "MAR" in capsys.readouterr().out


def test_analyze_reference_strategy_without_ice(tmp_path, capsys):
    d = make_dataset(n=30, J=3, miss=0.3, seed=2)
    data, cfg = setup_analysis(tmp_path, d)
    out = tmp_path / "res"
    code = main(["analyze", "--data", str(data), "--config", str(cfg), "--strategy", "MAR,J2R", "--out", str(out)])
    assert code == 1
    err = capsys.readouterr().err
    assert "error [impute] J2R: reference-based strategy requires ICE records" in err
    rows = {r["strategy"]: r for r in json.loads((out / "analysis.json").read_text())["results"]}
    assert rows["MAR"]["status"] == "ok" and rows["J2R"]["status"] == "error"
    assert json.loads((out / "manifest.json").read_text())["status"] == "partial"


def test_analyze_bootstrap_reproducible(tmp_path):
    d = make_dataset(n=30, J=3, miss=0.3, ice_frac=0.3, strategy=Strategy.J2R, seed=4)
    data, cfg = setup_analysis(tmp_path, d)
    texts = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        args = ["analyze", "--data", str(data), "--config", str(cfg), "--method", "bootstrap",
                "--B", "20", "--seed", "5", "--out", str(out), "--jobs", str(k + 1)]
        assert main(args) == 0
        texts.append((out / "analysis.json").read_bytes())
    assert texts[0] == texts[1]


def test_analyze_bad_inputs(tmp_path, capsys):
    d = make_dataset(n=10, J=2)
    data, cfg = setup_analysis(tmp_path, d)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {}}))
    assert main(["analyze", "--data", str(data), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "visits" in capsys.readouterr().err
    assert main(["analyze", "--data", str(tmp_path / "nope.csv"), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert "[data]" in capsys.readouterr().err


def test_bootstrap_plan_examples(capsys):
    assert main(["bootstrap-plan", "--p-inf", "0.025", "--B", "999", "--method", "normal"]) == 0
    out = capsys.readouterr().out
    assert "95% range of p_B: 2.02% to 3.02%" in out
    assert "P(p_B <= 2.5%) = 98.37%" in format_plan("normal", 0.02, 999)
    assert "P(p_B > 2.5%) = 96.42%" in format_plan("normal", 0.03, 999)
    assert "P(p_B <= 2.5%) = 99.97%" in format_plan("percentile", 0.02, 9999)
    assert main(["bootstrap-plan", "--p-inf", "0.025", "--B", "999", "9999"]) == 0
    assert capsys.readouterr().out.count("range of p_B") == 4


@pytest.mark.parametrize("p", ["0", "1", "1.5", "-0.1"])
def test_bootstrap_plan_rejects_p_inf(p, capsys):
    assert main(["bootstrap-plan", "--p-inf", p]) == 2
    assert "--p-inf" in capsys.readouterr().err


def test_simulate_one_sim_and_round_trip(tmp_path):
    out = tmp_path / "sim"
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[simulation]\nn_per_group = 30\n")
    assert main(["simulate", "--config", str(cfg), "--n-sims", "1", "--methods", "none", "--out", str(out)]) == 0
    t = SummaryTable.from_csv((out / "summary.csv").read_text())
    assert [r.strategy for r in t.rows] == ["MAR", "J2R", "CR", "CIR"]
    assert all(r.n_sims == 1 and np.isnan(r.sd_theta) for r in t.rows)
    js = json.loads((out / "summary.json").read_text())
    assert [r["mean_theta"] for r in js["rows"]] == [r.mean_theta for r in t.rows]
    assert js["config"]["n_per_group"] == 30
    assert (out / "summary.csv").read_text().startswith("# manifest: manifest.json\n")


def test_simulate_config_errors(tmp_path, capsys):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"resid_sd": -1, "bogus": 3}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.splitlines()
    assert "config error: unknown key: bogus" in err
    assert "config error: resid_sd must be positive" in err
    assert not (tmp_path / "o").exists()


def test_simulate_deterministic_across_jobs(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[simulation]\nn_per_group = 15\n")
    outs = []
    for k, jobs in enumerate(("1", "2", "1")):
        out = tmp_path / f"s{k}"
        assert main(["simulate", "--config", str(cfg), "--n-sims", "3", "--seed", "9", "--strategies", "MAR,CIR",
                     "--jobs", jobs, "--out", str(out)]) == 0
        outs.append([(out / f).read_bytes() for f in ("summary.csv", "summary.txt", "summary.json")])
    assert outs[0] == outs[1] == outs[2]
