import csv
import json

import pytest

from splitfed.cfgfile import ConfigError, parse
from splitfed.experiment import (
    ExperimentConfig, load_experiment, metrics_header, parse_experiment, run_experiment, set_field,
)
from splitfed.nn.archfile import CONFIG_DIR

SMALL = ["data.train_size=128", "data.test_size=32", "batch_size=8", "devices=2", "eval_every=2"]


def test_shipped_experiment_config_loads():
    cfg = load_experiment(CONFIG_DIR / "desk_experiment.cfg")
    assert (cfg.scheme, cfg.devices, cfg.k, cfg.rounds, cfg.batch_size) == ("split-sparse", 8, 0.1, 300, 32)
    assert (cfg.train_size, cfg.test_size) == (4096, 1024)
    assert cfg.resolve(cfg.architecture).is_file()


def test_overrides_and_flags():
    cfg = load_experiment(None, ["experiment.k=0.5", "rounds=7", "data.sharding=label-sorted"])
    assert (cfg.k, cfg.rounds, cfg.sharding) == (0.5, 7, "label-sorted")
    set_field(cfg, "error_feedback", True)
    assert cfg.error_feedback is True


@pytest.mark.parametrize("override", ["k=0", "devices=-1", "scheme=gossip", "rounds=abc", "nokey=1", "k", "output.nope=1",
                                      "error_feedback=maybe"])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        load_experiment(None, [override])


def test_config_errors_name_location():
    with pytest.raises(ConfigError, match=r"e\.cfg:3:.*devices"):
        parse_experiment(parse("[experiment]\nscheme = fedavg\ndevices = 0\n", "e.cfg", ()))
    with pytest.raises(ConfigError, match="unknown section"):
        parse_experiment(parse("[training]\nx = 1\n", "e.cfg", ()))


def test_effective_config_round_trips(tmp_path):
    cfg = load_experiment(None, ["k=0.25", "error_feedback=true", "seed=5"])
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    again = load_experiment(tmp_path / "c.cfg")
    for name in ("k", "error_feedback", "seed", "scheme", "devices", "train_size"):
        assert getattr(again, name) == getattr(cfg, name)


def test_header_schema():
    assert metrics_header(2) == ["round", "loss", "pooled_acc", "client_0_acc", "client_1_acc", "bytes_values_only",
                                 "bytes_on_wire", "bytes_up_on_wire", "bytes_down_on_wire"]


def test_zero_rounds_writes_header_only(tmp_path):
    cfg = load_experiment(None, SMALL + ["rounds=0"])
    assert run_experiment(cfg, tmp_path) == []
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows == [metrics_header(2)]
    assert json.loads((tmp_path / "summary.json").read_text())["final_pooled_acc"] is None


@pytest.mark.parametrize("scheme", ["centralized", "fedavg", "splitnn", "split-sparse"])
def test_run_writes_all_outputs_deterministically(tmp_path, scheme):
    cfg = load_experiment(None, SMALL + ["rounds=3", f"scheme={scheme}"])
    series = run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "summary.json", "traffic_table.csv", "config.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert [r["round"] for r in rows] == ["0", "1", "2"]
    assert rows[0]["pooled_acc"] == "" and rows[1]["pooled_acc"] != "" and rows[2]["pooled_acc"] != ""
    assert [m.bytes_on_wire for m in series] == [int(r["bytes_on_wire"]) for r in rows]
    if scheme == "centralized":
        assert all(r["bytes_on_wire"] == "0" for r in rows)


def test_seed_changes_outputs(tmp_path):
    a = load_experiment(None, SMALL + ["rounds=2", "seed=1"])
    b = load_experiment(None, SMALL + ["rounds=2", "seed=2"])
    run_experiment(a, tmp_path / "a")
    run_experiment(b, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_csv_data_source(tmp_path):
    from splitfed.data import synth_generate, write_segments

    write_segments(synth_generate(40, seed=0), tmp_path / "train.csv")
    write_segments(synth_generate(10, seed=1), tmp_path / "test.csv")
    text = "[experiment]\nscheme = splitnn\ndevices = 2\nrounds = 2\nbatch_size = 4\n[data]\nsource = csv\n" \
           "train_path = train.csv\ntest_path = test.csv\n"
    (tmp_path / "e.cfg").write_text(text)
    cfg = load_experiment(tmp_path / "e.cfg")
    assert len(run_experiment(cfg, tmp_path / "out")) == 2
    with pytest.raises(ConfigError):
        run_experiment(load_experiment(None, ["data.source=csv", "rounds=1"]), tmp_path / "x")


def test_defaults_match_dataclass():
    assert load_experiment(None) == ExperimentConfig()
