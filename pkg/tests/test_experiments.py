import csv
import json

import pytest

from degencontrol import ValidationError
from degencontrol.experiments import (CANONICAL, ExperimentConfig, config_from_dict, load_config,
                                      run_convergence_study)

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def test_canonical_config():
    cfg = load_config()
    assert cfg.domain.control_center == (0.6, 0.0) and cfg.domain.alpha == 1.0
    assert cfg.n == 33 and cfg.M == 64 and cfg.T == 1.0
    assert cfg.hum.beta == 1e-6 and cfg.convergence.ladder == (4, 8, 16, 32, 64)
    assert len(cfg.hash) == 16 and cfg.hash == load_config(CANONICAL).hash


def test_hash_ignores_output_dir_but_tracks_values():
    raw = tomllib.loads(CANONICAL.read_text())
    a = config_from_dict(raw)
    raw["run"]["output_dir"] = "elsewhere"
    assert config_from_dict(raw).hash == a.hash
    raw["time"]["M"] = 32
    assert config_from_dict(raw).hash != a.hash


def test_all_problems_reported_at_once():
    raw = tomllib.loads(CANONICAL.read_text())
    raw["grid"]["n"] = 32
    raw["hum"]["beta"] = 1e-12
    raw["run"]["solver"] = "magic"
    with pytest.raises(ValidationError) as info:
        config_from_dict(raw)
    msg = str(info.value)
    for field in ("grid.n", "hum.beta", "run.solver"):
        assert field in msg


def test_unknown_field_and_section():
    with pytest.raises(ValidationError, match=r"grid\.size: unknown field"):
        config_from_dict({"grid": {"size": 33}})
    with pytest.raises(ValidationError, match="unknown section"):
        config_from_dict({"gird": {}})


def test_malformed_file(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\nn = 3")
    with pytest.raises(ValidationError, match="malformed"):
        load_config(bad)
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DEGENCONTROL_OUTPUT_ROOT", str(tmp_path))
    assert ExperimentConfig().output_path() == tmp_path


def test_small_convergence_study(tmp_path):
    raw = tomllib.loads(CANONICAL.read_text())
    raw["convergence"].update(n=17, M=16, ladder=[4, 8], k_ref=32)
    cfg = config_from_dict(raw)
    table = run_convergence_study(cfg, out_dir=tmp_path / "tasks")
    assert table.l2_decreasing and table.terminal_decreasing
    assert sorted(p.name for p in (tmp_path / "tasks").iterdir()) == ["convergence_k4.json", "convergence_k8.json"]
    table.write_csv(tmp_path / "c.csv", cfg.stamp())
    rows = [r for r in csv.reader(l for l in open(tmp_path / "c.csv") if not l.startswith("#"))]
    assert rows[0] == ["k", "l2_error", "terminal_error", "diagnostic_log10"] and len(rows) == 3
    row = json.loads((tmp_path / "tasks" / "convergence_k4.json").read_text())
    assert row["config_hash"] == cfg.hash
