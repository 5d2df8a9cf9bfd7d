import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from parainverse.cli import main
from parainverse.config import ConfigError, load_config
from parainverse.export import read_csv

SMALL = {"grid": {"cells": 64}, "solver": {"dt": 4e-4}}


def write_config(tmp_path, extra=None, name="cfg.yaml"):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in (extra or {}).items():
        cfg.setdefault(section, {}).update(values)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(tmp_path, command, extra=None, out="out", seed=0):
    cfg = write_config(tmp_path, extra)
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), "--seed", str(seed)])
    return code, tmp_path / out


class TestConfig:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("grid:\n  cells: 64\n  colour: red\n")
        assert main(["forward", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_grid_size(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"grid.cells": 100})

    def test_dt_must_divide_window(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"solver.dt": 3e-4})

    def test_bad_threads(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["forward", "--config", str(cfg), "--out", str(tmp_path), "--threads", "0"]) == 2

    def test_defaults_listing_round_trips(self, capsys):
        assert main(["defaults"]) == 0
        listed = yaml.safe_load(capsys.readouterr().out)
        assert load_config(overrides={}).model_dump() == listed


class TestForward:
    def test_zero_problem_writes_zero_fields(self, tmp_path):
        code, out = run(tmp_path, "forward", {"experiment": {"zero": True}})
        assert code == 0
        for name, col in (("solution.csv", "u"), ("observation.csv", "z"), ("snapshot.csv", "u_t0")):
            header, rows, _ = read_csv(out / name)
            assert not np.any(np.array([float(r[header.index(col)]) for r in rows]))

    def test_row_counts(self, tmp_path):
        code, out = run(tmp_path, "forward")
        assert code == 0
        summary = json.loads((out / "forward.json").read_text())
        for name, info in summary["files"].items():
            _, rows, pre = read_csv(out / name)
            assert len(rows) == info["rows"]
            assert pre[2] == f"# sha256: {info['sha256']}"
        assert summary["files"]["snapshot.csv"]["rows"] == 63
        # 500 steps kept every 10th frame, plus the first.
        assert summary["frames"] == 51


class TestVerify:
    def test_default_passes(self, tmp_path, capsys):
        code, out = run(tmp_path, "verify", {"grid": {"cells": 128}, "experiment": {"verify_trials": 20}})
        assert code == 0
        report = json.loads((out / "verify.json").read_text())
        assert report["passed"] and not report["failed"]
        assert "PASS partition_of_unity" in capsys.readouterr().out

    def test_broken_profile_fails(self, tmp_path, capsys):
        extra = {"grid": {"cells": 128}, "experiment": {"verify_trials": 20, "partition_profile": "broken"}}
        code, out = run(tmp_path, "verify", extra)
        assert code == 1
        assert "partition_of_unity" in json.loads((out / "verify.json").read_text())["failed"]
        assert "failed checks" in capsys.readouterr().err

    def test_linear_reports_zero_remainder(self, tmp_path):
        extra = {"grid": {"cells": 128}, "problem": {"linear": True}, "experiment": {"verify_trials": 20}}
        code, out = run(tmp_path, "verify", extra)
        checks = {c["check"]: c for c in json.loads((out / "verify.json").read_text())["checks"]}
        assert code == 0 and checks["remainder_zero"]["passed"]
        assert "remainder_halving" not in checks


class TestScanAndInverse:
    def test_carleman_scan(self, tmp_path):
        code, out = run(tmp_path, "carleman-scan", {"carleman": {"ensemble_size": 4}})
        assert code == 0
        header, rows, _ = read_csv(out / "carleman_sweep.csv")
        assert len(rows) == 16 and header[-1] == "ratio"
        _, prow, _ = read_csv(out / "carleman_perturbed.csv")
        assert len(prow) == 3
        assert set(json.loads((out / "carleman.json").read_text())["max_ratio"]) == {"2.0", "4.0", "8.0", "16.0"}

    def test_reconstruct_direct_slice(self, tmp_path):
        code, out = run(tmp_path, "reconstruct", {"inverse": {"method": "direct_slice"}})
        assert code == 0
        summary = json.loads((out / "reconstruct.json").read_text())
        assert summary["error_L2_omega0"] <= 0.02
        header, rows, _ = read_csv(out / "f_rec.csv")
        assert header == ["x1", "f_rec", "f_true"] and len(rows) == 63

    def test_kappa_degenerate_ladder_exits_3(self, tmp_path, capsys):
        code, _ = run(tmp_path, "kappa", {"experiment": {"noise_levels": [0.0, 0.0], "seeds": [0, 1]}})
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_kappa_small_ladder(self, tmp_path):
        extra = {"experiment": {"noise_levels": [0.005, 0.02, 0.08], "seeds": [0, 1, 2]}}
        code, out = run(tmp_path, "kappa", extra)
        assert code == 0
        fit = json.loads((out / "kappa.json").read_text())
        assert fit["rows"] == 3 and np.isfinite(fit["kappa"])


@pytest.mark.parametrize("command,extra", [
    ("forward", {"experiment": {"noise_level": 0.01}}),
    ("reconstruct", {"experiment": {"noise_level": 0.01}, "inverse": {"max_iters": 20}}),
])
def test_same_seed_same_bytes(tmp_path, command, extra):
    _, a = run(tmp_path, command, extra, out="a", seed=7)
    _, b = run(tmp_path, command, extra, out="b", seed=7)
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_entry_point_runs(tmp_path):
    cfg = write_config(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "parainverse.cli", "forward", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "forward.json").exists()
