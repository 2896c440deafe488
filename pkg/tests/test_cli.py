import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from millstab.cli import main
from millstab.dynamics import read_trajectory_csv

SMALL_GRID = ["--set", "grid.speed_count=11", "--set", "grid.depth_count=6",
              "--set", "grid.speed_range=[10000,12000]", "--set", "grid.depth_range=[0.5,1.5]"]


def run(args, tmp_path, capsys=None):
    code = main(list(args) + ["--out", str(tmp_path)])
    return code


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSld:
    def test_small_grid(self, tmp_path, capsys):
        assert run(["sld", *SMALL_GRID], tmp_path) == 0
        lines = (tmp_path / "sld.csv").read_text().splitlines()
        assert len(lines) == 1 + 66
        side = json.loads((tmp_path / "sidecar.json").read_text())
        assert side["config"]["grid"]["speed_count"] == 11
        assert (tmp_path / "boundary.csv").exists()
        assert "stable fraction" in capsys.readouterr().out

    def test_zero_depth_row(self, tmp_path):
        assert run(["sld", "--set", "grid.depth_range=[0,0]", "--set", "grid.speed_count=21"], tmp_path) == 0
        rows = (tmp_path / "sld.csv").read_text().splitlines()[1:]
        assert len(rows) == 21
        header = (tmp_path / "sld.csv").read_text().splitlines()[0].split(",")
        col = header.index("stable")
        assert all(r.split(",")[col] == "1" for r in rows)

    def test_workers_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["sld", *SMALL_GRID, "--workers", "1"], a) == 0
        assert run(["sld", *SMALL_GRID, "--workers", "3"], b) == 0
        assert digest(a / "sld.csv") == digest(b / "sld.csv")

    @pytest.mark.parametrize("bad", [
        ["--set", "params.damping_ratio=1.5"],
        ["--set", "grid.speed_count=1"],
        ["--set", "nonsense"],
        ["--set", "extra.key=1"],
        ["--workers", "0"],
    ])
    def test_config_errors(self, tmp_path, bad, capsys):
        assert run(["sld", *bad], tmp_path) == 2
        assert "config error" in capsys.readouterr().err
        assert not (tmp_path / "sld.csv").exists()

    def test_config_file_and_override_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"grid": {"speed_count": 5, "depth_count": 3}}))
        out = tmp_path / "out"
        assert run(["sld", "--config", str(cfg), "--set", "grid.speed_count=4"], out) == 0
        assert len((out / "sld.csv").read_text().splitlines()) == 1 + 12
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2")
        assert run(["sld", "--config", str(bad)], out) == 2


class TestSimulate:
    def test_stable_point(self, tmp_path):
        assert run(["simulate", "--set", "simulate.omega_rpm=10600", "--set", "simulate.duration_s=0.05"],
                   tmp_path) == 0
        traj = read_trajectory_csv(tmp_path / "trajectory.csv")
        e = np.sum(traj.q ** 2, axis=1)
        n = len(e) // 5
        assert e[-n:].mean() < e[:n].mean()
        assert json.loads((tmp_path / "simulate.json").read_text())["diverged_at"] is None

    def test_unstable_point_diverges(self, tmp_path, capsys):
        assert run(["simulate", "--set", "simulate.duration_s=0.5"], tmp_path) == 4
        assert "diverged at" in capsys.readouterr().err
        meta = json.loads((tmp_path / "simulate.json").read_text())
        traj = read_trajectory_csv(tmp_path / "trajectory.csv")
        assert traj.t[-1] == pytest.approx(meta["diverged_at"])

    def test_seed_repeat(self, tmp_path):
        args = ["simulate", "--set", "simulate.noise_std=0.01", "--set", "simulate.duration_s=0.01", "--seed", "5"]
        assert run(args, tmp_path / "a") == 0 and run(args, tmp_path / "b") == 0
        assert digest(tmp_path / "a" / "trajectory.csv") == digest(tmp_path / "b" / "trajectory.csv")


class TestEstimate:
    @pytest.fixture
    def recorded(self, tmp_path):
        assert run(["simulate", "--set", "simulate.duration_s=0.03"], tmp_path / "sim") == 0
        return tmp_path / "sim" / "trajectory.csv"

    def test_round_trip(self, tmp_path, recorded, table1):
        assert run(["estimate", "--trajectory", str(recorded), "--t0", "0.01", "--t1", "0.03"],
                   tmp_path) == 0
        est = json.loads((tmp_path / "estimate.json").read_text())
        assert est["zeta"] == pytest.approx(table1.damping_ratio, rel=0.01)
        assert est["omega_n_rad_s"] == pytest.approx(table1.natural_frequency, rel=0.01)
        assert est["kt"] == pytest.approx(table1.tangential_coeff, rel=0.01)
        assert est["kr"] == pytest.approx(table1.radial_coeff, rel=0.01)

    def test_zero_motion(self, tmp_path, recorded):
        text = recorded.read_text().splitlines()
        header = text[0].split(",")
        rows = []
        for line in text[1:]:
            cells = line.split(",")
            rows.append(",".join(c if h in ("t", "omega_rpm") else "0.0" for h, c in zip(header, cells)))
        still = tmp_path / "still.csv"
        still.write_text("\n".join([text[0], *rows]) + "\n")
        assert run(["estimate", "--trajectory", str(still)], tmp_path) == 5

    def test_truncated(self, tmp_path, recorded, capsys):
        text = recorded.read_text()
        cut = tmp_path / "cut.csv"
        cut.write_text(text[: len(text) // 2].rsplit(",", 1)[0])
        assert run(["estimate", "--trajectory", str(cut)], tmp_path) == 2
        assert "line" in capsys.readouterr().err
        assert run(["estimate"], tmp_path) == 2


class TestControlSim:
    @pytest.mark.parametrize("mode,code", [("online_control", 0), ("offline_control", 4)])
    def test_shipped(self, tmp_path, mode, code):
        assert run(["control-sim", "--mode", mode], tmp_path) == code
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["verdict"] == ("stabilized" if code == 0 else "diverged")

    def test_open_loop_unstable(self, tmp_path):
        assert run(["control-sim", "--mode", "open_loop", "--set", "drift_events=[]",
                    "--set", "duration_s=0.15"], tmp_path) == 4

    def test_held(self, tmp_path):
        # at 3.5 mm no lattice speed is stable and growth at 14,300 rpm is slow:
        # the controller holds and alarms without the run blowing up
        code = run(["control-sim", "--mode", "offline_control", "--set", "initial.ap_mm=3.5",
                    "--set", "initial.omega_rpm=14300", "--set", "drift_events=[]",
                    "--set", "duration_s=0.1", "--set", "noise_std=0"], tmp_path)
        assert code == 6
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["verdict"] == "held"
        assert {e["event"] for e in report["events"]} == {"infeasible_hold"}

    def test_bad_scenario(self, tmp_path):
        assert run(["control-sim", "--set", "mode=fast"], tmp_path) == 2
        bad = tmp_path / "s.json"
        bad.write_text("{}")
        assert run(["control-sim", str(bad)], tmp_path) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "millstab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("sld", "simulate", "estimate", "control-sim"):
        assert cmd in out.stdout
