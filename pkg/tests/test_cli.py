import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from weakflow.cli import ConfigError, bundled_scenarios, main, parse_config

MINIMAL = {
    "schema_version": "1.0",
    "name": "tiny-heat",
    "task": "heat-convergence",
    "seed": 1,
    "cases": [{"label": "circle", "space": {"model": "torus", "n": 1, "side": 1.0, "N": 64,
                                             "strategy": "quasi-uniform"}}],
    "params": {"elapsed": 0.01, "j_values": [4, 8, 16, 32], "field": "cos-x0", "tol": 0.05},
}


def run_cli(*args, env=None):
    full_env = dict(os.environ)
    full_env.pop("WEAKFLOW_SEED", None)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "weakflow", *args], capture_output=True, text=True, env=full_env)


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return p


def test_bundled_scenarios_valid():
    cat = bundled_scenarios()
    assert len(cat) >= 13
    crits = {c.get("criterion") for c in cat.values()}
    assert set(range(1, 11)) <= crits


def test_list_json(capsys):
    assert main(["list", "--json"]) == 0
    items = json.loads(capsys.readouterr().out)
    names = {it["name"] for it in items}
    assert {"sphere-ricci-saturation", "sphere-static-saturation", "determinism-rerun"} <= names


def test_validate(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path, MINIMAL))]) == 0
    assert "valid" in capsys.readouterr().out


def test_sphere_ricci_saturation_passes(tmp_path):
    res = run_cli("run", "sphere-ricci-saturation", "--out", str(tmp_path))
    assert res.returncode == 0, res.stderr
    assert {"report.json", "data.csv", "manifest.json"} <= {p.name for p in tmp_path.iterdir()}
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == "pass" and report["schema_version"] == "1.0"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and len(manifest["config_sha256"]) == 64
    assert {"weakflow", "numpy", "scipy", "pot"} <= set(manifest["versions"])


def test_sphere_static_saturation_fails_with_witnesses(tmp_path):
    res = run_cli("run", "sphere-static-saturation", "--out", str(tmp_path))
    assert res.returncode == 2, res.stderr
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == "fail"
    assert report["cases"][0]["witnesses"]


def test_negative_N_names_field(tmp_path):
    cfg = json.loads(json.dumps(MINIMAL))
    cfg["cases"][0]["space"]["N"] = -5
    res = run_cli("run", str(write(tmp_path, cfg)))
    assert res.returncode == 1
    assert "cases/0/space/N" in res.stderr and "line" in res.stderr


def test_bad_json_reports_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config('{\n  "name": ,\n}')


def test_unknown_flag_and_field(tmp_path):
    assert run_cli("run", "--frobnicate", "x").returncode == 1
    cfg = dict(MINIMAL, colour="blue")
    res = run_cli("validate", str(write(tmp_path, cfg)))
    assert res.returncode == 1 and "colour" in res.stderr


def test_missing_config():
    res = run_cli("run", "no-such-scenario")
    assert res.returncode == 1


def test_seed_override(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    res = run_cli("run", str(cfg), "--out", str(tmp_path / "b"), env={"WEAKFLOW_SEED": "99"})
    assert res.returncode == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 1
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 99
    assert json.loads((tmp_path / "b" / "report.json").read_text())["seed"] == 99


def test_data_csv_byte_identical_across_processes(tmp_path):
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert run_cli("run", "wsrf-monotonicity", "--out", str(out), "--jobs", str(k + 1)).returncode == 0
        raw = (out / "data.csv").read_bytes()
        assert b"\r\n" not in raw
        digests.append(hashlib.sha256(raw).hexdigest())
    assert digests[0] == digests[1]
    with open(tmp_path / "run0" / "data.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["case", "series", "step", "x", "value"] and len(rows) > 1


def test_report_has_no_timing(tmp_path):
    assert main(["run", str(write(tmp_path, MINIMAL)), "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "report.json").read_text()
    assert "wall_time" not in text and "elapsed_s" not in text
