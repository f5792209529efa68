import csv
import json

import pytest

from svlab.cli import OUT_ENV, main, parse_seeds
from svlab.loop import RECORD_FIELDS

TINY = """
name = "tiny"
env = "four_rooms"
num_envs = 4
horizon = 16
minibatch_size = 32
epochs = 1
hidden = 8
delta_v = 0.3
k_min = 2
k_max = 4
total_rounds = 6
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_seeds():
    assert parse_seeds("3") == [3]
    assert parse_seeds("0,2") == [0, 2]
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        parse_seeds(",")


def test_ppo_baseline_every_round_updates(tmp_path):
    out = tmp_path / "base"
    assert main(["train", "--config", "ppo_baseline", "--seeds", "0", "--rounds", "10", "--out", str(out)]) == 0
    rows = read_rows(out / "seed_0.csv")
    assert len(rows) == 10
    assert all(r["target_updated"] == "True" for r in rows)
    assert list(rows[0]) == RECORD_FIELDS


def test_train_manifest_and_byte_identical_rerun(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", tiny_config, "--seeds", "0,1", "--out", str(a), "--deterministic"]) == 0
    assert main(["train", "--config", tiny_config, "--seeds", "0,1", "--out", str(b), "--deterministic"]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert manifest["config_hash"] == json.loads((b / "manifest.json").read_text())["config_hash"]
    assert {"wall_clock_s", "version", "optimal_value"} <= set(manifest)
    for seed in (0, 1):
        assert (a / f"seed_{seed}.csv").read_bytes() == (b / f"seed_{seed}.csv").read_bytes()


def test_parallel_jobs_match_sequential(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", tiny_config, "--seeds", "0-1", "--out", str(a)])
    main(["train", "--config", tiny_config, "--seeds", "0-1", "--out", str(b), "--jobs", "2"])
    for seed in (0, 1):
        assert (a / f"seed_{seed}.csv").read_bytes() == (b / f"seed_{seed}.csv").read_bytes()


def test_default_out_from_environment(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envout"))
    assert main(["train", "--config", tiny_config, "--rounds", "2"]) == 0
    assert (tmp_path / "envout" / "tiny" / "manifest.json").exists()


def test_snapshots(tmp_path, tiny_config):
    out = tmp_path / "snap"
    main(["train", "--config", tiny_config, "--rounds", "2", "--out", str(out), "--snapshots"])
    rows = read_rows(out / "seed_0_grid.csv")
    assert len(rows) == 2 * 104
    assert set(rows[0]) == {"round", "row", "col", "value_pred", "value_true", "visitation"}


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("gamma = 0.9\nepochs = 1.5\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert f"{bad}:2" in capsys.readouterr().err


def test_verify_suites(tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "--suite", "gate", "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["passed"] and data["suites"]["gate"]["violations"] == 0
    assert main(["verify", "--suite", "pdl", "--instances", "10"]) == 0
    assert main(["verify", "--suite", "nope"]) == 2


def test_plotdata_outputs(tmp_path, tiny_config):
    sv, base = tmp_path / "sv", tmp_path / "base"
    main(["train", "--config", tiny_config, "--seeds", "0", "--out", str(sv)])
    cfg = tmp_path / "base.toml"
    cfg.write_text(TINY.replace("delta_v = 0.3", "delta_v = inf").replace("k_min = 2", "k_min = 1")
                   .replace("k_max = 4", "k_max = 1"))
    main(["train", "--config", str(cfg), "--seeds", "0", "--out", str(base)])
    out = tmp_path / "plots"
    assert main(["plotdata", str(sv / "manifest.json"), "--baseline", str(base), "--out", str(out)]) == 0
    for name in ("learning_curve.csv", "gate_trace.csv", "dynamics.csv",
                 "learning_curve.svg", "gate_trace.svg", "dynamics.svg"):
        assert (out / name).exists(), name
    rows = read_rows(out / "gate_trace.csv")
    assert len(rows) == 6
    assert all(r["sv_threshold_seed0"] == "0.3" for r in rows)
    sv_rows = read_rows(sv / "seed_0.csv")
    assert [r["sv_target_updated_seed0"] == "1.0" for r in rows] == [r["target_updated"] == "True" for r in sv_rows]
    curve = read_rows(out / "learning_curve.csv")
    assert "baseline_v_target_seed0" in curve[0] and "sv_v_target_median" in curve[0]


def test_plotdata_missing_records(tmp_path, tiny_config):
    sv = tmp_path / "sv"
    main(["train", "--config", tiny_config, "--rounds", "2", "--out", str(sv)])
    (sv / "seed_0.csv").unlink()
    assert main(["plotdata", str(sv)]) == 2
