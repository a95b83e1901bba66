import json
from pathlib import Path

import pytest

from stochwave import Field
from stochwave.cli import ConfigError, load_config, main

SMALL = ["grid.N=8", "time.J=16"]


def run(tmp_path, *args, workers=1):
    """Exit code and the run directories created by this invocation."""
    root = Path(tmp_path)
    before = set(root.iterdir()) if root.exists() else set()
    code = main(list(args) + [f"output.directory={root}", "--workers", str(workers)])
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p not in before) if root.exists() else []
    return code, dirs


def payloads(run_dir: Path):
    """CSV and JSON artifacts keyed by relative path."""
    return {
        str(p.relative_to(run_dir)): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.suffix in (".csv", ".json")
    }


def test_kernel_check_defaults(tmp_path):
    code, dirs = run(tmp_path, "kernel-check")
    assert code == 0 and len(dirs) == 1
    fits = json.loads((dirs[0] / "scaling_fit.json").read_text())["fits"]
    assert set(fits) == {"0.5", "1.0", "1.5"}
    assert all(f["error"] < 1e-2 for f in fits.values())
    lines = (dirs[0] / "dalang.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"beta,t,integral,config_hash"


def test_beta_out_of_range_is_validation_error(tmp_path, capsys):
    code, dirs = run(tmp_path, "simulate", "noise.beta=3")
    assert code == 1 and dirs == []
    err = capsys.readouterr().err
    assert "(H)-2" in err and "]0,2[" in err


def test_unknown_subcommand(tmp_path, capsys):
    code, _ = run(tmp_path, "bogus")
    assert code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_keys_rejected(tmp_path):
    assert run(tmp_path, "simulate", "grid.M=3")[0] == 1
    assert run(tmp_path, "simulate", "colour.key=3")[0] == 1
    assert run(tmp_path, "simulate", "grid.N")[0] == 1
    ini = tmp_path / "bad.ini"
    ini.write_text("[noise]\nbetta = 1.0\n")
    with pytest.raises(ConfigError):
        load_config(str(ini))


def test_overrides_compose_left_to_right(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[grid]\nN = 32\n")
    cfg = load_config(str(ini), ["grid.N=8", "grid.N=16"])
    assert cfg["grid"]["N"] == 16
    assert load_config(str(ini))["grid"]["N"] == 32


def test_hash_tracks_every_key():
    base = load_config(None)
    assert load_config(None, ["noise.seed=0"]).hash == base.hash
    for ov in ("noise.seed=1", "grid.L=8.5", "ladder.epsilons=1,0.5", "coeffs.sigma=constant:2", "output.formats=json"):
        assert load_config(None, [ov]).hash != base.hash


def test_resolved_config_dumped_and_reloads(tmp_path):
    code, dirs = run(tmp_path, "kernel-check", "kernel.betas=0.5,1.25")
    assert code == 0
    text = (dirs[0] / "config.ini").read_text()
    cfg = load_config(str(dirs[0] / "config.ini"))
    assert cfg["kernel"]["betas"] == (0.5, 1.25)
    assert cfg.hash in text and dirs[0].name.startswith(cfg.hash[:16])


def test_simulate_writes_fields_with_hash(tmp_path):
    code, dirs = run(tmp_path, "simulate", *SMALL, "noise.seed=3")
    assert code == 0
    d = dirs[0]
    h = load_config(str(d / "config.ini")).hash
    man = json.loads((d / "fields" / "manifest.json").read_text())
    assert man["config_hash"] == h and man["seed"] == 3 and len(man["files"]) == 17
    f = Field.load(d / "fields" / man["files"][-1])
    assert f.values.shape == (8, 8, 8)
    for name, blob in payloads(d).items():
        assert h.encode() in blob, name


def test_ldp_slope_byte_identical_across_runs_and_workers(tmp_path):
    args = ["ldp-slope", *SMALL, "ladder.M=200", "ladder.epsilons=1,0.5,0.25", "event.units=sd", "event.threshold=0.5"]
    _, d1 = run(tmp_path, *args, workers=1)
    _, d2 = run(tmp_path, *args, workers=1)
    _, d3 = run(tmp_path, *args, workers=2)
    assert d1[0] != d2[0] != d3[0]
    p1, p2, p3 = (payloads(d[0]) for d in (d1, d2, d3))
    assert set(p1) == {"ladder.csv", "slope_report.json"}
    assert p1 == p2 == p3


def test_skeleton_and_rate_min(tmp_path):
    code, dirs = run(tmp_path / "s", "skeleton", *SMALL, "control.kind=oscillating")
    assert code == 0
    summary = json.loads((dirs[0] / "summary.json").read_text())
    assert summary["rate"] > 0
    code, dirs = run(tmp_path / "r", "rate-min", *SMALL, "optimizer.restarts=1", "optimizer.K=3", "event.threshold=0.5")
    assert code == 0
    rep = json.loads((dirs[0] / "rate_report.json").read_text())
    assert rep["status"] == "certified"
    assert rep["I_hat"] == pytest.approx(rep["oracle"], rel=0.05)
    assert json.loads((dirs[0] / "control" / "manifest.json").read_text())["config_hash"] == rep["config_hash"]


def test_numerical_failure_exit_code(tmp_path):
    code, dirs = run(
        tmp_path, "rate-min", *SMALL, "optimizer.restarts=1", "optimizer.K=3", "optimizer.norm_bound=1e-6"
    )
    assert code == 2
    diag = json.loads((dirs[0] / "diagnostics.json").read_text())
    assert diag["error"] == "SolverError"


def test_holder_and_noise_check(tmp_path):
    code, dirs = run(
        tmp_path / "h", "holder", "grid.N=16", "time.J=8", "holder.trajectories=100", "holder.lags=1,2,4,6,10"
    )
    assert code == 0
    rep = json.loads((dirs[0] / "exponent.json").read_text())
    assert 0 < rep["alpha_hat"] < 1.2 and rep["upper"] == pytest.approx(0.5)
    code, dirs = run(tmp_path / "n", "noise-check", "grid.N=16", "noise.draws=50")
    assert code == 0
    rows = (dirs[0] / "covariance.csv").read_text().splitlines()
    assert rows[0] == "lag_index,lag,empirical,oracle,relative_error,config_hash" and len(rows) == 6
