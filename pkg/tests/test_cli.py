import json
import subprocess
import sys

import pytest

from resreset.cli import _floats, run

FAST_RTE = ["rte-sweep", "--model", "simple", "--tau-d", "1e-6,2e-6", "--scheme", "passive"]


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_validate_passes(tmp_path, capsys):
    assert run(["validate", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 13 and all(l.startswith("PASS") for l in lines)
    data = json.loads((tmp_path / "validate.json").read_text())
    assert data["manifest"] == _manifest(tmp_path)["hash"]


def test_unknown_subcommand(capsys):
    assert run(["bogus"]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "unknown_subcommand" and "rte-sweep" in err["message"]


def test_usage_error():
    assert run(["rte-sweep", "--no-such-flag"]) == 2


def test_bad_config_reports_key_path(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[device]\nT1 = abc\n")
    assert run(["validate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "device.T1" in err["message"]


def test_unknown_scheme_is_config_error(tmp_path):
    assert run(["rte-sweep", "--model", "simple", "--scheme", "magic", "--tau-d", "1e-6",
                "--out", str(tmp_path)]) == 4


def test_precedence_flag_over_file_over_default(tmp_path):
    cfg = tmp_path / "part.cfg"
    cfg.write_text("[qec]\nF_d = 0.99\n")
    assert run(FAST_RTE + ["--out", str(tmp_path / "a")]) == 0
    assert _manifest(tmp_path / "a")["config"]["F_d"] == 0.999
    assert run(FAST_RTE + ["--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert _manifest(tmp_path / "b")["config"]["F_d"] == 0.99
    assert run(FAST_RTE + ["--config", str(cfg), "--F-d", "0.9", "--out", str(tmp_path / "c")]) == 0
    assert _manifest(tmp_path / "c")["config"]["F_d"] == 0.9
    hashes = {_manifest(tmp_path / d)["hash"] for d in "abc"}
    assert len(hashes) == 3


def test_outputs_byte_identical_across_reruns_and_workers(tmp_path):
    args = FAST_RTE + ["--mc-traces", "20000", "--raw-traces", "5", "--seed", "3"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    assert files == ["raw_flipping_passive.txt", "rte_flipping.csv", "rte_flipping_mc.csv",
                     "rte_flipping_summary.json"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_csv_header_carries_manifest_hash(tmp_path):
    assert run(FAST_RTE + ["--out", str(tmp_path)]) == 0
    h = _manifest(tmp_path)["hash"]
    assert (tmp_path / "rte_flipping.csv").read_text().splitlines()[0] == f"# manifest: {h}"
    assert json.loads((tmp_path / "rte_flipping_summary.json").read_text())["manifest"] == h


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RESRESET_OUT", str(tmp_path / "env"))
    assert run(FAST_RTE) == 0
    assert (tmp_path / "env" / "manifest.json").exists()


def test_simulate_and_readout_commands(tmp_path):
    assert run(["simulate-cavity", "--duration", "1e-6", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "cavity_summary.json").read_text())
    assert "manifest" in summary
    assert run(["readout-map", "--amplitudes", "5.1e7", "--frequencies", "6.8488e9",
                "--shots", "2000", "--out", str(tmp_path / "r")]) == 0
    metrics = json.loads((tmp_path / "r" / "readout_metrics.json").read_text())
    assert metrics["manifest"] == _manifest(tmp_path / "r")["hash"]


def test_range_parser():
    assert _floats("100e-9:500e-9:100e-9") == [1e-7, 2e-7, 3e-7, 4e-7, 5e-7]
    assert _floats("1,2.5") == [1.0, 2.5]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "resreset", "bogus"], capture_output=True,
                         text=True)
    assert res.returncode == 3
    assert json.loads(res.stderr)["error"] == "unknown_subcommand"
