import json

import numpy as np
import pytest

from slamim import cli, io


@pytest.fixture(scope="module")
def short_scenario(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "plaza.json"
    p.write_text(json.dumps({"preset": "plaza", "duration": 6.0}))
    return p


@pytest.fixture(scope="module")
def runs(short_scenario, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for suite in ("gps_only", "gps_vision"):
        d = root / suite
        assert cli.main(["run", "--scenario", str(short_scenario), "--suite", suite, "--seed", "3",
                         "--out", str(d)]) == 0
        out[suite] = d
    return out


def test_outputs_written(runs):
    for d in runs.values():
        for name in cli.OUTPUTS + cli.PLOTS:
            assert (d / name).is_file()
        est = io.read_table(d / "estimates.csv")
        assert len(est["epoch"]) == 6
    assert (runs["gps_vision"] / "plot_vision_status.dat").is_file()
    assert not (runs["gps_only"] / "plot_vision_status.dat").exists()


def test_fault_rows_per_suite(runs):
    kinds = {}
    for suite, d in runs.items():
        with open(d / "faults.csv") as f:
            kinds[suite] = {line.split(",")[1] for line in f.readlines()[1:]}
    assert "superpixel" not in kinds["gps_only"]
    assert {"gps", "superpixel", "mode"} <= kinds["gps_vision"]


def test_summary_header(runs):
    meta, s = cli.read_summary(runs["gps_vision"])
    assert meta["scenario"] == "plaza" and meta["seed"] == "3" and meta["suite"] == "gps_vision"
    assert s.n_epochs == 6 and np.isfinite(s.rmse)


def test_deterministic(runs, short_scenario, tmp_path):
    d = tmp_path / "again"
    assert cli.main(["run", "--scenario", str(short_scenario), "--suite", "gps_only", "--seed", "3",
                     "--out", str(d)]) == 0
    assert (d / "estimates.csv").read_text() == (runs["gps_only"] / "estimates.csv").read_text()


def test_compare_identical(runs, capsys):
    assert cli.main(["compare", str(runs["gps_only"]), str(runs["gps_only"])]) == 0
    text = capsys.readouterr().out
    for k in cli.BETTER_LOW:
        row = next(line for line in text.splitlines() if line.startswith(k))
        assert float(row.split()[3]) == 0.0 and row.split()[4] == "same"


def test_compare_suites(runs, tmp_path):
    out = tmp_path / "cmp.txt"
    assert cli.main(["compare", str(runs["gps_only"]), str(runs["gps_vision"]), "--out", str(out)]) == 0
    assert "rmse" in out.read_text()


def test_compare_rejects_other_seed(runs, short_scenario, tmp_path, capsys):
    d = tmp_path / "seed4"
    assert cli.main(["run", "--scenario", str(short_scenario), "--suite", "gps_only", "--seed", "4",
                     "--out", str(d)]) == 0
    capsys.readouterr()
    assert cli.main(["compare", str(runs["gps_only"]), str(d)]) == 2
    assert "seed" in capsys.readouterr().err


def test_bad_config_keys(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 1}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_bad_probability(tmp_path):
    assert cli.main(["run", "--pfa", "1.5", "--out", str(tmp_path / "o")]) == 2


def test_missing_scenario(tmp_path):
    assert cli.main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_scenario_contents(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"preset": "plaza", "duration": -1}))
    assert cli.main(["run", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 2


def test_config_overrides_flags(tmp_path, short_scenario):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": str(short_scenario), "suite": "gps_only", "seed": 5,
                               "out": str(tmp_path / "from_cfg")}))
    assert cli.main(["run", "--config", str(cfg), "--seed", "1"]) == 0
    meta, _ = cli.read_summary(tmp_path / "from_cfg")
    assert meta["seed"] == "5" and meta["suite"] == "gps_only"


def test_monte_carlo_mode(tmp_path, short_scenario):
    out = tmp_path / "mc"
    assert cli.main(["run", "--scenario", str(short_scenario), "--suite", "gps_only", "--seed", "10",
                     "--monte-carlo", "2", "--out", str(out)]) == 0
    assert (out / "seed_0010" / "summary.txt").is_file() and (out / "seed_0011" / "summary.txt").is_file()
    assert "runs = 2" in (out / "monte_carlo.txt").read_text()
