"""End-to-end CLI coverage: run, sweep, inspect, validate-config."""

import json

import pytest

from helpers import toy_config_dict
from sqmd.cli import cli_main


def write_config(tmp_path, name="config.json", **overrides):
    cfg = toy_config_dict(**overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_run_writes_record_and_csv(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "results"
    code = cli_main(["run", "--config", str(cfg), "--out", str(out)])
    assert code == 0
    record = json.loads((out / "record.json").read_text())
    assert record["protocol"] == "SQMD"
    csv_text = (out / "metrics.csv").read_text().splitlines()
    assert csv_text[0] == "round,client_id,protocol,split,accuracy,precision,recall,quality_score,in_Q"
    assert len(csv_text) > 1
    assert "final mean accuracy" in capsys.readouterr().out


def test_run_overrides_seed_and_protocol(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "results"
    code = cli_main([
        "run", "--config", str(cfg), "--out", str(out),
        "--seed", "42", "--protocol", "I-SGD", "--quiet",
    ])
    assert code == 0
    record = json.loads((out / "record.json").read_text())
    assert record["seed"] == 42 and record["protocol"] == "I-SGD"


def test_run_identical_outputs_byte_for_byte(tmp_path):
    cfg = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["run", "--config", str(cfg), "--out", str(out_a), "--quiet"]) == 0
    assert cli_main(["run", "--config", str(cfg), "--out", str(out_b), "--quiet"]) == 0
    assert (out_a / "record.json").read_bytes() == (out_b / "record.json").read_bytes()
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()


def test_validate_config_accepts_good_and_names_violation(tmp_path, capsys):
    good = write_config(tmp_path, name="good.json")
    assert cli_main(["validate-config", "--config", str(good)]) == 0
    assert "config ok" in capsys.readouterr().out

    bad = write_config(tmp_path, name="bad.json",
                       server={"quality_set_size": 2, "neighbor_count": 3})
    code = cli_main(["validate-config", "--config", str(bad)])
    assert code != 0
    err = capsys.readouterr().err
    assert "neighbor_count" in err and "quality_set_size" in err


def test_validate_config_rejects_bad_join_schedule(tmp_path, capsys):
    bad = write_config(tmp_path, name="joins.json",
                       join_schedule=[{"clients": [0, 1], "start_round": 1}])
    assert cli_main(["validate-config", "--config", str(bad)]) != 0
    assert "partition the client ids" in capsys.readouterr().err


def test_sweep_writes_records_and_comparison(tmp_path):
    sweep_file = tmp_path / "sweep.json"
    sweep_file.write_text(json.dumps({
        "base": toy_config_dict(),
        "sweep": {"server.neighbor_count": [1, 2, 3]},
    }))
    out = tmp_path / "sweep_out"
    assert cli_main(["sweep", "--config", str(sweep_file), "--out", str(out), "--quiet"]) == 0
    records = sorted(out.glob("record_*.json"))
    assert len(records) == 3
    lines = (out / "comparison.csv").read_text().splitlines()
    assert lines[0] == "server.neighbor_count,accuracy,precision,recall"
    assert len(lines) == 4


def test_inspect_prints_summary_and_timeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "results"
    cli_main(["run", "--config", str(cfg), "--out", str(out), "--quiet"])
    capsys.readouterr()
    assert cli_main(["inspect", "--record", str(out / "record.json")]) == 0
    text = capsys.readouterr().out
    assert "summary:" in text
    assert "quality-set timeline:" in text
    assert "final round 20" in text


def test_unknown_flag_and_missing_config_fail(tmp_path, capsys):
    assert cli_main(["run", "--bogus"]) != 0
    assert cli_main(["run", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) != 0
    assert "error:" in capsys.readouterr().err


def test_invalid_json_reports_parse_error(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert cli_main(["validate-config", "--config", str(broken)]) != 0
    assert "invalid JSON" in capsys.readouterr().err


def test_record_json_round_trip_via_files(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "results"
    cli_main(["run", "--config", str(cfg), "--out", str(out), "--quiet"])
    from sqmd.simulation import RunRecord

    loaded = RunRecord.from_dict(json.loads((out / "record.json").read_text()))
    assert loaded.to_json() == (out / "record.json").read_text()
