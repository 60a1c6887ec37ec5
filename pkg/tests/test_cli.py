import json

import numpy as np
import pytest

from app.main import build_parser, main
from app.services.progress_service import progress_service
from app.services.scenario_service import bouncing_ball_config, dump_scenario_config


def test_parser_collects_overrides(tmp_path):
    args = build_parser().parse_args([
        "simulate", "--config", "bouncing_ball", "--out", str(tmp_path),
        "--tol-override", "rtol=1e-9", "--tol-override", "tie_band=0", "--seed", "3",
    ])
    assert args.tol_override == [("rtol", "1e-9"), ("tie_band", "0")]
    assert args.seed == 3


def test_malformed_override_is_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["simulate", "--tol-override", "rtol"])


class TestCommands:
    def test_certify_ball(self, tmp_path):
        assert main(["certify", "--config", "bouncing_ball", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "bouncing_ball_certify.json").read_text())
        assert report["certificate"]["verdict"]["case"] == "Case1"
        assert report["certificate"]["errors"] == []
        assert (tmp_path / "bouncing_ball_certify.txt").exists()
        assert progress_service.get_run("certify") is None

    def test_infeasible_certificate(self, tmp_path):
        cfg = bouncing_ball_config()
        perturbed = cfg.model_copy(update={
            "system": cfg.system.model_copy(update={"L": [[-1.5, 0.0], [0.0, -1.5]]}),
        })
        path = tmp_path / "perturbed.yaml"
        path.write_text(dump_scenario_config(perturbed))
        assert main(["certify", "--config", str(path), "--out", str(tmp_path)]) == 3
        report = json.loads((tmp_path / "bouncing_ball_certify.json").read_text())
        assert report["certificate"]["jump_conditions"]["ok"] is False

    def test_simulate_writes_one_csv_per_trajectory(self, tmp_path):
        assert main(["simulate", "--config", "bouncing_ball", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "bouncing_ball_reference.csv").exists()
        assert (tmp_path / "bouncing_ball_tracking.csv").exists()
        report = json.loads((tmp_path / "bouncing_ball_simulate.json").read_text())
        assert [s["trajectory"] for s in report["simulations"]] == ["reference", "tracking"]
        assert len(report["simulations"][0]["jumps"]) == 7

    def test_simulate_is_deterministic(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        for out in (first, second):
            assert main(["simulate", "--config", "bouncing_ball", "--out", str(out)]) == 0
        for name in ("bouncing_ball_reference.csv", "bouncing_ball_tracking.csv", "bouncing_ball_simulate.txt"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_jump_cap_is_abnormal(self, tmp_path):
        assert main(["simulate", "--config", "bouncing_ball", "--max-jumps", "3", "--out", str(tmp_path)]) == 4

    def test_track_ball(self, tmp_path):
        assert main(["track", "--config", "bouncing_ball", "--out", str(tmp_path)]) == 0
        d = np.loadtxt(tmp_path / "bouncing_ball_distance_d.csv", delimiter=",", skiprows=1)
        assert d.shape[1] == 3
        assert d[-1, 2] < d[0, 2]
        header = (tmp_path / "bouncing_ball_lyapunov_V.csv").read_text().splitlines()[0]
        assert header == "t,j,V,region"


class TestConfigErrors:
    def test_missing_config(self, tmp_path):
        assert main(["certify", "--out", str(tmp_path)]) == 2
        assert progress_service.get_run("certify") is None

    def test_unreadable_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2

    def test_schema_error(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("name: bad\nhorizon: 1.0\n")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 2

    def test_unknown_override(self, tmp_path):
        argv = ["certify", "--config", "bouncing_ball", "--tol-override", "colour=red", "--out", str(tmp_path)]
        assert main(argv) == 2
