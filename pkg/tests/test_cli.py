import csv
import json

import numpy as np
import pytest

from keyhole.cli import main
from keyhole.io import read_kht, write_kht, write_pgm


def _write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def sim_config(tmp_path):
    img = np.zeros((16, 16))
    img[2:14, 4:7] = 1
    img[2:5, 7:12] = 1
    obj = tmp_path / "obj.pgm"
    write_pgm(obj, img)
    cfg = {
        "version": 1,
        "object": str(obj),
        "trajectory": {"plane": "constant_z", "waypoints": [[-0.125, 0, 1], [0.125, 0, 1]],
                       "samples_per_segment": 4},
        "noise": {"kind": "poisson_snr", "target_snr": 15},
        "forward": {"n_bins": 1024, "gain": 1e4},
        "physical_size": 0.25,
        "seed": 7,
    }
    return tmp_path, cfg


@pytest.fixture
def simulated(sim_config):
    tmp_path, cfg = sim_config
    out = tmp_path / "sim"
    assert main(["simulate", "--config", _write(tmp_path / "sim.json", cfg), "--out", str(out)]) == 0
    return tmp_path, out


def test_simulate_outputs(simulated):
    tmp_path, out = simulated
    y = read_kht(out / "measurements.kht")
    assert y.shape == (5, 1024)
    side = json.loads((out / "measurements.json").read_text())
    assert len(side["trajectory"]["translations"]) == 5
    assert side["noise"]["seed"] == 7
    for name in ("object.kht", "object.pgm", "measurements.pgm"):
        assert (out / name).exists()


def test_simulate_deterministic(sim_config):
    tmp_path, cfg = sim_config
    path = _write(tmp_path / "sim.json", cfg)
    main(["simulate", "--config", path, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", path, "--out", str(tmp_path / "b")])
    main(["simulate", "--config", path, "--out", str(tmp_path / "c"), "--seed", "8"])
    a = (tmp_path / "a" / "measurements.kht").read_bytes()
    assert a == (tmp_path / "b" / "measurements.kht").read_bytes()
    assert a != (tmp_path / "c" / "measurements.kht").read_bytes()


def test_simulate_missing_object(sim_config, capsys):
    tmp_path, cfg = sim_config
    cfg["object"] = str(tmp_path / "nowhere.pgm")
    assert main(["simulate", "--config", _write(tmp_path / "s.json", cfg), "--out", str(tmp_path / "o")]) == 2
    assert "nowhere.pgm" in capsys.readouterr().err


def test_simulate_bad_field_reports_path(sim_config, capsys):
    tmp_path, cfg = sim_config
    cfg["noise"] = {"kind": "poisson_snr", "target_snr": -1}
    assert main(["simulate", "--config", _write(tmp_path / "s.json", cfg), "--out", str(tmp_path / "o")]) == 2
    assert "noise" in capsys.readouterr().err
    cfg["noise"] = {"kind": "none"}
    cfg["bogus"] = 1
    assert main(["simulate", "--config", _write(tmp_path / "s.json", cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["simulate"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", _write(tmp_path / "v.json", {"version": 9}), "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--threads", "0", "--config", str(tmp_path / "bad.json")]) == 2


def test_runtime_error_exit_3(tmp_path):
    # a valid KHT1 header with a corrupt payload is a runtime failure, not a usage error
    bad = tmp_path / "m.kht"
    bad.write_bytes(b"KHT1" + bytes(4))
    assert main(["reconstruct", str(bad), "--out", str(tmp_path / "r"), "--method", "gd"]) == 3


def test_reconstruct_em_and_estimate(simulated):
    tmp_path, out = simulated
    cfg = {"em": {"n_iter": 4, "sigma": 50.0, "lam": 0.0, "recon_shape": [16, 16]},
           "candidate_grid": {"plane": "constant_z", "center": [0, 0, 1], "extent": [0.25, 0.25], "shape": [3, 3]},
           "forward": {"physical_size": 0.25}}
    rec = tmp_path / "rec"
    assert main(["reconstruct", str(out / "measurements.kht"), "--config", _write(tmp_path / "r.json", cfg),
                 "--out", str(rec), "--method", "em"]) == 0
    with open(rec / "diagnostics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert float(rows[-1]["beta"]) == 1.0
    assert read_kht(rec / "weights.kht").shape == (5, 9)
    assert read_kht(rec / "albedo.kht").shape == (16, 16)
    assert main(["estimate-trajectory", str(rec / "weights.kht")]) == 0
    traj = json.loads((rec / "trajectory.json").read_text())
    assert len(traj["translations"]) == 5


def test_reconstruct_gd(simulated):
    tmp_path, out = simulated
    cfg = {"em": {"lam": 0.0, "recon_shape": [16, 16]}, "gd_iterations": 20, "forward": {"physical_size": 0.25}}
    rec = tmp_path / "gd"
    assert main(["reconstruct", str(out / "measurements.kht"), "--config", _write(tmp_path / "g.json", cfg),
                 "--out", str(rec), "--method", "gd"]) == 0
    with open(rec / "diagnostics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 20
    assert not (rec / "weights.kht").exists()


def test_reconstruct_gd_mismatched_l(simulated):
    tmp_path, out = simulated
    y = read_kht(out / "measurements.kht")
    write_kht(tmp_path / "short.kht", y[:3])
    (tmp_path / "short.json").write_text((out / "measurements.json").read_text())
    cfg = {"em": {"recon_shape": [16, 16]}, "forward": {"physical_size": 0.25}}
    assert main(["reconstruct", str(tmp_path / "short.kht"), "--config", _write(tmp_path / "g.json", cfg),
                 "--out", str(tmp_path / "x"), "--method", "gd"]) == 2


def test_reconstruct_without_poses_or_grid(tmp_path):
    write_kht(tmp_path / "m.kht", np.ones((2, 1024)))
    cfg = _write(tmp_path / "c.json", {"em": {"recon_shape": [4, 4]}})
    assert main(["reconstruct", str(tmp_path / "m.kht"), "--config", cfg, "--out", str(tmp_path / "a"),
                 "--method", "gd"]) == 2
    assert main(["reconstruct", str(tmp_path / "m.kht"), "--config", cfg, "--out", str(tmp_path / "b"),
                 "--method", "em"]) == 2


def test_evaluate_rows(tmp_path):
    img = np.zeros((16, 16))
    img[3:12, 5:8] = 1
    img[3:6, 8:12] = 1
    write_kht(tmp_path / "truth.kht", img)
    shifted = np.roll(img, 2, axis=1)
    write_kht(tmp_path / "recon.kht", shifted)
    report = tmp_path / "report.csv"
    assert main(["evaluate", str(tmp_path / "truth.kht"), str(tmp_path / "truth.kht"), "--out", str(report),
                 "--plane", "constant_y"]) == 0
    assert main(["evaluate", str(tmp_path / "truth.kht"), str(tmp_path / "recon.kht"), "--out", str(report),
                 "--plane", "constant_y", "--method", "em", "--snr", "15", "--object-id", "F"]) == 0
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[0]["ssim"]) == 1.0
    assert float(rows[1]["ssim"]) == pytest.approx(1.0, abs=1e-6)
    assert rows[1]["rtf"].split()[1] == "-2"
    assert rows[1]["object"] == "F"
    write_kht(tmp_path / "small.kht", np.ones((4, 4)))
    assert main(["evaluate", str(tmp_path / "truth.kht"), str(tmp_path / "small.kht"), "--out", str(report)]) == 2


def test_evaluate_with_trajectories(tmp_path):
    img = np.eye(8)
    write_kht(tmp_path / "t.kht", img)
    est = {"plane": "constant_z", "translations": [[0.1, 0, 1], [0.2, 0, 1]]}
    true = {"trajectory": {"plane": "constant_z", "translations": [[0.0, 0, 1], [0.1, 0, 1]]}}
    report = tmp_path / "r.csv"
    assert main(["evaluate", str(tmp_path / "t.kht"), str(tmp_path / "t.kht"), "--out", str(report),
                 "--estimated", _write(tmp_path / "e.json", est),
                 "--true-trajectory", _write(tmp_path / "s.json", true)]) == 0
    with open(report) as fh:
        row = next(csv.DictReader(fh))
    assert float(row["trajectory_rmse"]) == 0.0


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
