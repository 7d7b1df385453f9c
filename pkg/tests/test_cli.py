import json
import os

import pytest
import yaml

from hedgelab import cli
from hedgelab.config import ConfigError, load_config, parse_years

TINY = {
    "synthetic": {"n_days": 756, "seed": 3, "iv_vol": 0.3},
    "years": {"first": 2015, "test": [2017]},
    "td3": {"episodes": 30, "hidden": 8, "batch": 16, "warmup": 100, "checkpoint_every": 15},
    "distill": {"sample_size": 200, "support_cap": 400, "probe_shape": [3, 3, 3],
                "gp": {"population": 30, "generations": 2, "refine_every": 2, "refine_random": 2}},
    "policies": ["Agent", "BS", "HW", "Haircut", "Symbolic"],
    "bootstrap_reps": 50,
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(dict(TINY, out=str(tmp_path / "run"))))
    return str(p)


def test_config_defaults_and_overrides():
    c = load_config(None, ["td3.episodes=7", "years.test=[2018, 2019]", "cost=0.001"])
    assert c.td3.episodes == 7 and c.years.test == (2018, 2019) and c.cost == 0.001
    assert c.hash() == load_config(None, ["cost=1e-3", "td3.episodes=7", "years.test=[2018,2019]"]).hash()
    assert c.hash() != load_config().hash()


@pytest.mark.parametrize("ov", ["td3.nope=1", "td3.episodes=abc", "seed=1.5", "nokey", "td3=3"])
def test_config_errors(ov):
    with pytest.raises(ConfigError):
        load_config(None, [ov])


def test_parse_years():
    assert parse_years("2017-2019,2021") == (2017, 2018, 2019, 2021)
    with pytest.raises(ConfigError):
        parse_years("2019-2017")


def test_bad_config_exit_2(tmp_path, capsys):
    assert cli.main(["synth", "--set", "td3.bogus=1", "--out", str(tmp_path)]) == 2
    assert cli.main(["backtest", "--years", "2016", "--out", str(tmp_path)]) == 2
    assert cli.main(["backtest", "--policies", "Agent,Oracle,BS", "--out", str(tmp_path)]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_data_exit_3(tmp_path, cfg_file, capsys):
    assert cli.main(["train", "--config", cfg_file]) == 3
    assert "hedgelab synth" in capsys.readouterr().err
    assert cli.main(["synth", "--config", cfg_file]) == 0
    assert cli.main(["backtest", "--config", cfg_file]) == 3
    assert "hedgelab train" in capsys.readouterr().err
    assert cli.main(["ingest", "--config", cfg_file, "--set", f"data.chain={tmp_path / 'x.csv'}"]) == 3


def test_internal_error_exit_4(tmp_path, monkeypatch):
    def boom(cfg):
        raise AssertionError("invariant broken")
    monkeypatch.setitem(cli._DISPATCH, "synth", boom)
    assert cli.main(["synth", "--out", str(tmp_path)]) == 4


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["synth", "--out", str(d), "--set", "synthetic.n_days=60"]) == 0
    assert (a / "chain.csv").read_bytes() == (b / "chain.csv").read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert man["command"] == "synth" and len(man["config_hash"]) == 16


def test_full_pipeline(tmp_path, cfg_file, capsys):
    run = tmp_path / "run"
    for cmd in ("synth", "train", "backtest", "distill", "long-horizon", "report"):
        assert cli.main([cmd, "--config", cfg_file]) == 0, cmd
    out = capsys.readouterr().out
    assert "label\tleft\tright" in out
    header = (run / "report" / "table1.tsv").read_text().splitlines()[0].split("\t")
    for col in ("Reward", "CVaR 5%", "Mean P&L", "Log DownVar", "Log Var"):
        assert col in header
    assert os.path.exists(run / "report" / "delta_gap_surface_2017.png")
    assert (run / "distill" / "2017" / "selected.txt").read_text().strip()
    assert "eval 2018" not in (run / "long_horizon" / "long_horizon.tsv").read_text()
    assert "eval 2017" in (run / "long_horizon" / "long_horizon.tsv").read_text()
