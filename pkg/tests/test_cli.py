import json
import subprocess
import sys

import pytest

from degencontrol.cli import main
from degencontrol.experiments import CANONICAL

SMALL = CANONICAL.read_text().replace("n = 33", "n = 17").replace("sizes = [33, 65]", "sizes = [17, 33]")


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_unknown_and_missing_subcommand(capsys):
    assert main(["bogus"]) == 64
    assert main([]) == 64
    assert "unknown subcommand" in capsys.readouterr().err


def test_unknown_field_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nsize = 33\n[time]\nM = 2\n")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "grid.size: unknown field" in err


def test_malformed_toml_exits_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\n")
    assert main(["hum", "--config", str(bad), "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("cmd", [["solve"], ["hum", "--beta", "1e-3"], ["observability", "--n", "17"],
                                 ["weights-check", "--eps", "0.1", "--samples", "1000"], ["spectral"]])
def test_subcommands_write_manifest(cmd, small_cfg, tmp_path):
    out = tmp_path / "out"
    assert main(cmd + ["--config", str(small_cfg), "--out", str(out)]) == 0
    name = {"weights-check": "weights"}.get(cmd[0], cmd[0])
    man = json.loads((out / name / "manifest.json").read_text())
    assert man["version"] and len(man["config_hash"]) == 16
    for f in man["files"]:
        assert (out / name / f).exists()


def test_reruns_are_byte_identical(small_cfg, tmp_path):
    for d in ("a", "b"):
        assert main(["hum", "--config", str(small_cfg), "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "hum" / "hum_beta1e-06.json").read_bytes()
    assert a == (tmp_path / "b" / "hum" / "hum_beta1e-06.json").read_bytes()


def test_output_root_env(small_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("DEGENCONTROL_OUTPUT_ROOT", str(tmp_path / "env"))
    assert main(["solve", "--config", str(small_cfg)]) == 0
    assert (tmp_path / "env" / "solve" / "trajectory.npy").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "degencontrol", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
