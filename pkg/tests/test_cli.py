import subprocess
import sys

import pytest

from mesic.cli import main
from mesic.io import read_csv, verify_manifest


def config(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


SHORT_COUPLED = "scenario: coupled-1d\ntime:\n  duration: 2.0\noutputs:\n  cadence: 5\n"


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["run"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_is_usage_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert main(["run", "--config", config(tmp_path, "physics:\n  mass: 2\n")]) == 2


def test_run_then_audit(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", config(tmp_path, SHORT_COUPLED), "--out", str(out)]) == 0
    assert verify_manifest(out) == []
    assert main(["audit-sem", "--run", str(out)]) == 0
    rows = read_csv(out / "conservation.csv")
    assert rows and set(rows[0]) == {"time", "P0", "P1"}
    assert read_csv(out / "sem_divergence.csv")
    assert main(["audit-sem", "--run", str(out), "--tolerance-override", "1e-12"]) == 1


def test_audit_rejects_non_run(tmp_path):
    assert main(["audit-sem", "--run", str(tmp_path)]) == 2


def test_run_is_idempotent(tmp_path):
    cfg = config(tmp_path, SHORT_COUPLED)
    for name in ("a", "b"):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "MANIFEST").read_text() == (tmp_path / "b" / "MANIFEST").read_text()
    # the resolved config reproduces the run byte for byte
    assert main(["run", "--config", str(tmp_path / "a" / "config.resolved"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "MANIFEST").read_text() == (tmp_path / "c" / "MANIFEST").read_text()


def test_derive_check(tmp_path, capsys):
    cfg = config(tmp_path, "scenario: free-particle\n")
    assert main(["derive-check", "--config", cfg]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "direction,index,derivative,scale,relative,passed"
    assert main(["derive-check", "--config", cfg, "--perturb"]) == 1
    assert main(["derive-check", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert all(r["passed"] == 1 for r in read_csv(tmp_path / "o" / "residuals.csv"))


def test_dispersion(tmp_path):
    assert main(["dispersion", "--n", "128", "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "dispersion.csv")) == 6
    assert len(read_csv(tmp_path / "convergence.csv")) == 4


def test_yukawa_1d(tmp_path):
    assert main(["yukawa", "--dim", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "yukawa_profile.csv")
    assert rows[0]["r"] == 0.0 and len(rows) == 800


def test_eta_check(tmp_path):
    cfg = config(tmp_path, "scenario: coupled-1d\ntime:\n  duration: 2.0\n")
    assert main(["eta-check", "--config", cfg, "--against", "affine"]) == 0
    assert main(["eta-check", "--config", cfg, "--against", "smooth"]) == 0
    assert main(["eta-check", "--config", cfg, "--against", "smooth", "--tolerance-override", "0"]) == 1
    assert main(["eta-check", "--config", cfg, "--against", "nonsense"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mesic", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("mesic ")
