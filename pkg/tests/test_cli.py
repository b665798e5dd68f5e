from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from parametrix.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
QUICK = str(CONFIGS / "quick.yaml")


def _run(sub, out, *extra, config=QUICK):
    return main([sub, "--config", config, "--out", str(out), *extra])


def _header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def test_flow_is_deterministic_and_seeded(tmp_path):
    assert _run("flow", tmp_path / "a") == 0
    assert _run("flow", tmp_path / "b") == 0
    assert _run("flow", tmp_path / "c", "--seed-override", "5") == 0
    a = (tmp_path / "a" / "flow.csv").read_bytes()
    assert a == (tmp_path / "b" / "flow.csv").read_bytes()
    assert a != (tmp_path / "c" / "flow.csv").read_bytes()
    assert _header(tmp_path / "a" / "flow.csv") == ["seed", "x0", "xi0", "energy_drift", "reversal_error",
                                                    "symplectic_defect", "jacobian_reversal_defect"]


def test_manifest_fields(tmp_path):
    assert _run("classify", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["subcommand"] == "classify" and man["status"] == 0
    assert len(man["config_sha256"]) == 64
    assert set(man["versions"]) == {"package", "python", "numpy", "scipy"}
    assert man["timings"]["seconds"] >= 0
    assert "classify.csv" in man["outputs"]
    man2 = json.loads((tmp_path / "manifest.json").read_text())
    assert man2["config"] == man["config"]


def test_certification_failure_exit_code(tmp_path):
    assert _run("certify", tmp_path, config=str(CONFIGS / "slow_decay.yaml")) == 1
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "certification"
    assert "first_failure" in err
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == 1


def test_certification_success(tmp_path):
    assert _run("certify", tmp_path, config=str(CONFIGS / "bump.yaml")) == 0
    assert (tmp_path / "certify.json").exists()


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("lambdas: [64]\nunknown_key: 1\n")
    assert _run("flow", tmp_path / "out", config=str(bad)) == 2
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert err["error"] == "config" and "unknown_key" in err["message"]


def test_unknown_subcommand_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_kernel_columns(tmp_path):
    assert _run("kernel", tmp_path) == 0
    head = _header(tmp_path / "kernel.csv")
    assert head[:2] == ["t", "lambda"]
    assert head[-6:] == ["re_k", "im_k", "scaled_abs_k", "regime", "error_estimate", "converged"]
