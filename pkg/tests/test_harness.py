import json
import math

import numpy as np
import pytest

from offline_vcg import cli, harness
from offline_vcg.mdp import RewardProfile, m2_mdp, save_instance


def small_config(n=1, Ks=(200, 800), seeds=2, **eval_overrides):
    doc = harness.default_config(n, Ks, seeds)
    doc["learner"]["T"] = 8
    doc["evaluation"]["family"]["max_cells"] = 1
    doc["evaluation"].update(eval_overrides)
    return doc


def write_config(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# --- config parsing ---------------------------------------------------------


def test_missing_horizon_is_named():
    doc = small_config()
    doc["instance"] = {"kind": "random", "S": 2, "A": 2, "n": 1}
    with pytest.raises(harness.ConfigError) as err:
        harness.RunConfig.from_dict(doc)
    assert err.value.path == "instance.H"
    assert "H" in str(err.value)


@pytest.mark.parametrize("Ks", [[0], [100, 0], []])
def test_k_must_be_positive(Ks):
    doc = small_config()
    doc["data"]["K"] = Ks
    with pytest.raises(harness.ConfigError, match="data.K"):
        harness.RunConfig.from_dict(doc)


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["learner"].update(zeta1="MID"), "learner.zeta1"),
    (lambda d: d["learner"].update({"lambda": {"mode": "auto"}}), "learner.lambda.mode"),
    (lambda d: d["data"].update(seeds=[1, 1]), "data.seeds"),
    (lambda d: d["evaluation"].update(metrics=["profit"]), "evaluation.metrics[0]"),
    (lambda d: d.update(schema="v0"), "schema"),
])
def test_config_errors_carry_paths(mutate, path):
    doc = small_config()
    mutate(doc)
    with pytest.raises(harness.ConfigError) as err:
        harness.RunConfig.from_dict(doc)
    assert err.value.path == path


def test_config_round_trip():
    cfg = harness.RunConfig.from_dict(small_config())
    assert harness.RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_overrides(seed=5).seed == 5


def test_seed_count_expands():
    cfg = harness.RunConfig.from_dict(small_config(seeds=3))
    assert cfg.data.seeds == (0, 1, 2)


def test_sub_seeds_are_independent_of_k_list():
    assert harness.sub_seed(0, 0) == harness.sub_seed(0, 0)
    assert harness.sub_seed(0, 1, 3, 200) != harness.sub_seed(0, 1, 3, 2000)
    assert harness.sub_seed(0, 0) != harness.sub_seed(1, 0)


def test_hyperparameters_log_theory_values():
    spec = harness.RunConfig.from_dict(small_config()).learner
    hp = spec.hyper(200, 2, 2, 2, 1, 1.0)
    assert hp["eta"] == 1.0
    assert hp["lam"] == pytest.approx((1.0 / (4 * (20 / 200) ** 2)) ** (1 / 3))
    assert hp["lam_theory"] > 0 and hp["eps_s_theory"] > 0


# --- learn ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_report():
    cfg = harness.RunConfig.from_dict(small_config())
    return harness.cmd_learn(cfg)


def test_learn_columns_and_rows(small_report):
    rep, ok = small_report
    assert ok
    assert rep.header[:4] == ["zeta1", "zeta2", "K", "seed"]
    for col in ("subopt_welfare", "subopt_agent_0", "subopt_seller", "ir_min_0", "truthfulness_gain_0",
                "price_0", "price_star_0", "price_error_0", "policy_price_error_0", "converged"):
        assert col in rep.header
    assert [(r["K"], r["seed"]) for r in rep.rows] == [(200, 0), (200, 1), (800, 0), (800, 1)]
    # desiderata only at the largest K
    assert rep.rows[0]["truthfulness_gain_0"] == harness.NOT_COMPUTED
    assert rep.rows[-1]["truthfulness_gain_0"] != harness.NOT_COMPUTED


def test_learn_sidecar(small_report):
    rep, _ = small_report
    side = json.loads(rep.json_text())
    assert side["schema"] == harness.REPORT_SCHEMA
    assert set(side["hyperparameters"]) == {"200", "800"}
    assert side["aggregates"]["PES,OPT"]["K"] == [200, 800]
    assert side["bound_comparison"]["800"]["ok"]
    assert "wall_time_s" not in rep.json_text()


def test_learn_is_byte_deterministic(small_report):
    rep, _ = small_report
    again, _ = harness.cmd_learn(harness.RunConfig.from_dict(small_config()))
    assert again.csv_text() == rep.csv_text()
    assert again.json_text() == rep.json_text()


def test_parallel_matches_serial(small_report):
    rep, _ = small_report
    par, _ = harness.cmd_learn(harness.RunConfig.from_dict(small_config()), jobs=2)
    assert par.csv_text() == rep.csv_text()
    assert par.json_text() == rep.json_text()


def test_cli_learn_writes_reports(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["learn", "--config", write_config(tmp_path, small_config(Ks=(100,), seeds=1)),
                     "--out", str(out)])
    assert code == 0
    assert {p.name for p in out.iterdir()} == {"report.csv", "report.json", "timing.json"}


def test_cli_learn_without_output_dir(tmp_path, capsys):
    assert cli.main(["learn", "--config", write_config(tmp_path, small_config())]) == 2
    assert "output.dir" in capsys.readouterr().err


def test_cli_bad_config_exit_code(tmp_path, capsys):
    doc = small_config()
    doc["data"]["K"] = [0]
    code = cli.main(["learn", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "data.K" in capsys.readouterr().err
    p = tmp_path / "broken.json"
    p.write_text("{")
    assert cli.main(["exact", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_cli_rejects_zero_jobs(tmp_path):
    code = cli.main(["learn", "--config", write_config(tmp_path, small_config()), "--out", str(tmp_path / "o"),
                     "--jobs", "0"])
    assert code == 2


# --- sweep-report --------------------------------------------------------------


def _learn_to(tmp_path, name, seeds, Ks=(200, 800)):
    doc = small_config(Ks=Ks)
    doc["data"]["seeds"] = seeds
    rep, _ = harness.cmd_learn(harness.RunConfig.from_dict(doc))
    rep.write(tmp_path / name)
    return tmp_path / name


def test_sweep_single_report_is_passthrough(tmp_path, small_report):
    rep, _ = small_report
    rep.write(tmp_path / "a")
    header, rows, agg = harness.sweep_report([tmp_path / "a"])
    assert header == rep.header
    assert harness.rows_to_csv(rows) == rep.csv_text()
    assert agg == rep.sidecar["aggregates"]


def test_sweep_unions_disjoint_seeds(tmp_path, small_report):
    a = _learn_to(tmp_path, "a", [0])
    b = _learn_to(tmp_path, "b", [1])
    header, rows, agg = harness.sweep_report([a, b])
    rep, _ = small_report
    assert harness.rows_to_csv(rows) == rep.csv_text()
    assert agg == rep.sidecar["aggregates"]
    files = harness.write_sweep(tmp_path / "sweep", header, rows, agg)
    assert "plot_subopt_welfare" in files


def test_sweep_rejects_duplicates(tmp_path):
    a = _learn_to(tmp_path, "a", [0], Ks=(100,))
    with pytest.raises(harness.ReportMergeError, match="duplicate"):
        harness.sweep_report([a, a / "report.csv"])


def test_sweep_cli(tmp_path):
    a = _learn_to(tmp_path, "a", [0], Ks=(100,))
    assert cli.main(["sweep-report", str(a), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["sweep-report", str(a), str(a), "--out", str(tmp_path / "s")]) == 2


def test_slope_is_finite_on_three_k_sweep():
    doc = small_config(Ks=(200, 2000, 20000), seeds=3, desiderata_at="none", bounds=False)
    doc["learner"]["T"] = 64
    rep, _ = harness.cmd_learn(harness.RunConfig.from_dict(doc))
    slope = rep.sidecar["aggregates"]["PES,OPT"]["subopt_slope"]
    assert slope is not None and math.isfinite(slope)
    agg_csv = harness.aggregate_csv(rep.sidecar["aggregates"], rep.header)
    assert "subopt_slope" in agg_csv.splitlines()[0] and "nan" not in agg_csv


def test_slope_undefined_at_zero_medians():
    assert harness.loglog_slope([1, 10], [0.0, 0.0]) is None
    assert harness.loglog_slope([1, 10], [1.0, 0.1]) == pytest.approx(-1.0)


# --- exact and check ------------------------------------------------------


def test_exact_on_m2(tmp_path):
    cfg = harness.RunConfig.from_dict(small_config())
    rep, ok = harness.cmd_exact(cfg)
    row = rep.rows[0]
    assert ok
    assert row["welfare_gap"] == 0.0 and row["min_agent_utility"] >= 0 and row["max_truthfulness_gain"] <= 0


def test_exact_on_zero_reward_file(tmp_path):
    path = tmp_path / "zero.json"
    save_instance(path, m2_mdp(), RewardProfile(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 2)), 2.0))
    doc = small_config()
    doc["instance"] = {"kind": "file", "path": str(path)}
    code = cli.main(["exact", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == 0
    rep = (tmp_path / "o" / "report.csv").read_text().splitlines()
    assert all(float(v) == 0.0 for v in rep[1].split(","))


def test_exact_missing_file_is_config_error(tmp_path):
    doc = small_config()
    doc["instance"] = {"kind": "file", "path": str(tmp_path / "nope.json")}
    with pytest.raises(harness.ConfigError):
        harness.cmd_exact(harness.RunConfig.from_dict(doc))


def test_check_suites(tmp_path, capsys):
    assert cli.main(["check", "--suite", "desiderata", "--out", str(tmp_path / "d.json")]) == 0
    assert json.loads((tmp_path / "d.json").read_text())["passed"] is True
    assert "desiderata: PASS" in capsys.readouterr().out
    assert cli.main(["check", "--suite", "regret"]) == 0


def test_unknown_suite_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["check", "--suite", "nope"])
    assert err.value.code == 2
