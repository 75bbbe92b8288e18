import numpy as np
import pytest
import yaml

from mesic.config import BUILTINS, builtin, dump_config, parse_config, resolve_config
from mesic.errors import CFLError, ConfigError, DivergenceError, NormalizationError
from mesic.io import (load_run, read_csv, read_grid, snapshot_indices, verify_manifest, write_grid,
                      write_manifest)
from mesic.simulate import build_scenario, run


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_round_trip(tmp_path, name):
    cfg = builtin(name)
    again = parse_config(write(tmp_path, dump_config(cfg)))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_minimal_builtin_is_fully_defaulted(tmp_path):
    cfg = parse_config(write(tmp_path, "scenario: coupled-1d\n"))
    assert cfg.name == "coupled-1d"
    assert cfg.physics.eps == 0.5 and cfg.kernel.width == 3.0
    assert cfg.time.dt is not None and cfg.lambda_measure.domain == [0.0, 16.0]


def test_overrides_merge_with_builtin(tmp_path):
    cfg = parse_config(write(tmp_path, "scenario: coupled-1d\nphysics:\n  eps: 0.25\n"))
    assert cfg.physics.eps == 0.25 and cfg.physics.M == 1.0


def test_cfl_violation(tmp_path):
    with pytest.raises(CFLError, match="dt"):
        parse_config(write(tmp_path, "scenario: free-field-1d\ntime:\n  dt: 0.5\n  duration: 1.0\n"))
    with pytest.raises(CFLError, match="cfl"):
        resolve_config({"scenario": "free-field-1d", "time": {"cfl": 2.0}})


def test_non_integral_duration():
    with pytest.raises(ConfigError, match="integral"):
        resolve_config({"scenario": "free-field-1d", "time": {"dt": 0.03, "duration": 1.0}})


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="physics.mass"):
        parse_config(write(tmp_path, "physics:\n  mass: 1.0\n"))
    with pytest.raises(ConfigError, match="unknown builtin"):
        resolve_config({"scenario": "nope"})


def test_parse_error_position(tmp_path):
    with pytest.raises(ConfigError, match=r"line \d+, column \d+"):
        parse_config(write(tmp_path, "grid:\n  n: [1, 2\n"))
    with pytest.raises(ConfigError, match="mapping"):
        parse_config(write(tmp_path, "- 1\n- 2\n"))
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.yaml")


def test_unnormalized_measure(tmp_path):
    text = yaml.safe_dump({"scenario": "coupled-1d",
                           "lambda_measure": {"kind": "tabulated", "points": [0.0, 16.0], "values": [1.0, 1.0]}})
    with pytest.raises(NormalizationError, match="integrates"):
        parse_config(write(tmp_path, text))


def test_physics_validation(tmp_path):
    with pytest.raises(ConfigError, match="subluminal"):
        parse_config(write(tmp_path, "scenario: free-particle\nparticle:\n  velocity: [1.2]\n"))
    with pytest.raises(ConfigError, match="probe"):
        parse_config(write(tmp_path, "scenario: free-field-1d\noutputs:\n  probes: [[50.0]]\n"))


# -- files -------------------------------------------------------------------

def test_grid_round_trip(tmp_path, rng):
    values = rng.normal(size=(3, 4, 5))
    write_grid(tmp_path / "a.grid", values, [1.0, 2.0, 3.0], [-0.5, 0.0, 0.1], 0.1 + 0.2, "phi")
    back, meta = read_grid(tmp_path / "a.grid")
    np.testing.assert_array_equal(back, values)
    assert meta["dims"] == (3, 4, 5) and meta["time"] == 0.1 + 0.2 and meta["field"] == "phi"
    (tmp_path / "b.grid").write_bytes(b"something else\nend\n")
    with pytest.raises(ConfigError):
        read_grid(tmp_path / "b.grid")


def test_manifest_detects_tampering(tmp_path):
    (tmp_path / "x.csv").write_text("a\n1\n")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "y.txt").write_text("hello")
    write_manifest(tmp_path)
    assert verify_manifest(tmp_path) == []
    (tmp_path / "sub" / "y.txt").write_text("hellO")
    assert verify_manifest(tmp_path) == ["sub/y.txt"]


def test_snapshot_indices_keep_neighbours():
    assert snapshot_indices(10, 5) == [0, 1, 4, 5, 6, 9, 10]


def test_run_directory_layout(tmp_path):
    sc = build_scenario(builtin("coupled-1d", time={"duration": 1.0}, outputs={"cadence": 4}))
    rec = run(sc, out=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"config.resolved", "trajectory.csv", "diagnostics.csv", "MANIFEST", "snapshots"} <= names
    assert verify_manifest(tmp_path) == []
    assert parse_config(tmp_path / "config.resolved") == sc.cfg
    traj = read_csv(tmp_path / "trajectory.csv")
    assert len(traj) == rec.times.size
    assert [r["x1"] for r in traj] == list(rec.physical_trajectory()[:, 1])
    phi, meta = read_grid(tmp_path / "snapshots" / "t_000004.grid")
    np.testing.assert_array_equal(phi, rec.phi[4])
    stored = load_run(tmp_path)
    np.testing.assert_allclose(stored.particle.z, rec.particle.z, rtol=0, atol=0)


def test_failed_run_leaves_error_marker(tmp_path, monkeypatch):
    import mesic.simulate as simulate

    calls = {"n": 0}
    real = simulate.step_field

    def failing(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 3:
            raise DivergenceError("non-finite field")
        return real(*args, **kw)

    monkeypatch.setattr(simulate, "step_field", failing)
    with pytest.raises(DivergenceError):
        run(build_scenario(builtin("free-field-1d", time={"duration": 1.0}, outputs={"cadence": 1})), out=tmp_path)
    assert "DivergenceError" in (tmp_path / "ERROR").read_text()
    assert load_run(tmp_path).last_index == 3
    with pytest.raises(ConfigError):
        load_run(tmp_path / "nowhere")
