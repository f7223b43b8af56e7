import json
import subprocess
import sys

import pytest

from tfqkd import __version__
from tfqkd.cli import RESULT_COLUMNS, main, parse_csv, render_csv
from tfqkd.config import SimConfig, config_from_document


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "16 bit combinations" in out


def test_run_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--seed", "7", "--frames", "50000", "--out", str(tmp_path / name / "r.csv")]) == 0
    for f in ("r.csv", "r.json", "r.manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = json.loads((tmp_path / "a" / "r.manifest.json").read_text())
    assert man["seed"] == 7 and man["tfqkd_version"] == __version__
    assert config_from_document(man["config"])[0].seed == 7


def test_csv_embeds_config_and_round_trips_floats(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--frames", "20000", "--seed", "3", "--out", str(out)]) == 0
    meta, rows = parse_csv(out.read_text())
    assert meta["schema_version"] == "1"
    cfg, _ = config_from_document(meta["config"])
    assert cfg.frames == 20000 and cfg.seed == 3
    mirror = json.loads(out.with_suffix(".json").read_text())
    assert list(rows[0]) == list(RESULT_COLUMNS)
    for col in ("visibility", "e_b", "R"):
        assert float(rows[0][col]) == mirror["rows"][0][col]


def test_render_csv_exact_floats():
    x = 0.1 + 0.2
    text = render_csv(("value",), [{"value": x}], {})
    _, rows = parse_csv(text)
    assert float(rows[0]["value"]) == x


def test_sweep_distance_four_rows(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["sweep-distance", "--preset", "visibility", "--frames", "20000", "--out", str(out)]) == 0
    _, rows = parse_csv(out.read_text())
    assert [float(r["value"]) for r in rows] == [0.0, 10.0, 20.0, 50.0]
    assert all(r["visibility"] for r in rows)


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"timing": {"guard_ps": 600, "bin_ps": 1000}, "extra": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "guard" in err and "extra" in err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["sweep-guard", "--values", "100", "600"]) == 2


def test_print_config_applies_flag_overrides(tmp_path, capsys):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"frames": 10, "seed": 1}))
    assert main(["run", "--config", str(cfgfile), "--seed", "9", "--print-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["frames"] == 10 and doc["seed"] == 9
    assert config_from_document({})[0] == SimConfig()


def test_disturbance_command(tmp_path):
    out = tmp_path / "dist.json"
    assert main(["disturbance", "--frames", "100000", "--format", "json", "--out", str(out)]) == 0
    row = json.loads(out.read_text())["rows"][0]
    assert (row["segment_start"], row["segment_end"]) == (40000, 60000)
    assert row["segment_qber_uncorrected"] > 0.8 > row["segment_qber_corrected"]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "tfqkd", "selftest"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_records_output(tmp_path):
    rec = tmp_path / "records.csv"
    assert main(["run", "--frames", "20000", "--out", str(tmp_path / "r.csv"), "--records", str(rec)]) == 0
    lines = rec.read_text().splitlines()
    assert lines[0] == "frame_index,bin,port,alice_bit,bob_bit,corrected_flag"
    assert len(lines) > 1
