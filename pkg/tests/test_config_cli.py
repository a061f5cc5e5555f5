import os

import numpy as np
import pytest
import yaml

from ksf import cli
from ksf.calib import R_SN_C, TumViCalib, write_calib_file
from ksf.config import ConfigError, ExperimentConfig, default_config_text, from_dict, load_config, to_dict
from ksf.montecarlo import run_montecarlo

SHORT = {"trajectory": {"kind": "wave", "duration": 3.0}, "runs": 2, "seed": 5}


def test_defaults_round_trip(tmp_path):
    text = default_config_text()
    path = tmp_path / "c.yaml"
    path.write_text(text)
    cfg = load_config(path)
    assert to_dict(cfg) == to_dict(ExperimentConfig())
    assert cfg.trajectory_spec().tilt_deg == 40.0
    assert from_dict({"trajectory": {"kind": "wave"}}).trajectory_spec().tilt_deg == 10.0


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"filter": {"n_kf": 7, "bogus": 1}})
    with pytest.raises(ConfigError, match="runs"):
        from_dict({"runs": 0})
    with pytest.raises(ConfigError):
        from_dict({"imu": {"model": "simple"}})      # needs an IMU-centric main camera
    with pytest.raises(ConfigError):
        from_dict({"cameras": [{"intrinsics": {"fz": 1.0}}]})
    with pytest.raises(ConfigError):
        from_dict({"imu": {"true": {"T_g": np.zeros((3, 3)).tolist()}}})
    with pytest.raises(ConfigError):
        from_dict({"trajectory": {"duration": -1.0}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("trajectory: [unclosed\n")
    with pytest.raises(ConfigError, match="parse"):
        load_config(bad)


def test_lock_names_reach_the_filter():
    cfg = from_dict({"filter": {"lock": ["T_g", "cam0.t_r"]}})
    assert cfg.filter_config().locked == ("T_g", "cam0.t_r")


def read_all(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_campaign_is_deterministic(tmp_path):
    a = run_montecarlo(from_dict(SHORT), out_dir=str(tmp_path / "a"))[0]
    b = run_montecarlo(from_dict(SHORT), jobs=2, out_dir=str(tmp_path / "b"))[0]
    fa, fb = read_all(tmp_path / "a"), read_all(tmp_path / "b")
    assert "aggregate/nees.csv" in fa and "runs/1/state.csv" in fa
    assert fa == fb
    assert a.successes == 2 and not a.failures
    c = run_montecarlo(from_dict({**SHORT, "seed": 6}), out_dir=str(tmp_path / "c"))[0]
    assert not np.array_equal(a.nees["position"], c.nees["position"], equal_nan=True)


def test_cli_print_default_config(capsys):
    assert cli.main(["--print-default-config"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == to_dict(ExperimentConfig())
    assert cli.main([]) == 2


def test_cli_simulate_and_evaluate(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"trajectory": {"kind": "wave", "duration": 5.0}}))
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "final position error" in text and "ATE" in text
    for f in ("trajectory.tum", "truth.tum", "state.csv", "imu.csv"):
        assert (out / f).exists()
    header = (out / "state.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["epoch", "px", "py", "pz"] and "cam0_td" in header
    assert cli.main(["evaluate", str(out / "truth.tum"), str(out / "truth.tum")]) == 0
    text = capsys.readouterr().out
    assert "ATE 0.000000 m" in text


def test_cli_montecarlo(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(SHORT))
    assert cli.main(["montecarlo", "--config", str(cfg), "--runs", "1", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "successful runs: 1/1" in text and "NEES orientation" in text
    summary = (tmp_path / "aggregate" / "summary.csv").read_text()
    assert "nees_pose_last10s" in summary


def test_cli_convert_calib(tmp_path, capsys):
    c = TumViCalib(np.eye(3), np.eye(3), np.array([0.01, 0.0, 0.0]), np.zeros(3), R_SN_C.T, np.zeros(3))
    write_calib_file(tmp_path / "in.txt", c)
    assert cli.main(["convert-calib", str(tmp_path / "in.txt")]) == 0
    frag = yaml.safe_load(capsys.readouterr().out)
    assert frag["imu"]["true"]["b_g_deg"][0] == pytest.approx(np.degrees(0.01))
    from_dict(frag)
    assert cli.main(["convert-calib", str(tmp_path / "in.txt"), "-o", str(tmp_path / "o.yaml")]) == 0
    assert from_dict(yaml.safe_load((tmp_path / "o.yaml").read_text()))


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nope: 1\n")
    assert cli.main(["simulate", "--config", str(bad)]) == 1
    assert "error" in capsys.readouterr().err
    assert cli.main(["evaluate", str(tmp_path / "missing.tum"), str(tmp_path / "x.tum")]) == 1


def test_single_noise_free_run_with_perfect_init():
    init = {k: 0.0 for k in ("position", "velocity", "b_g_deg", "b_a", "T_g", "T_s", "T_a",
                             "ext_translation", "focal", "principal", "t_d", "t_r")}
    init.update(orientation_deg=[0.0] * 3, distortion=[0.0] * 4)
    cfg = from_dict({"trajectory": {"kind": "wave", "duration": 10.0}, "runs": 1,
                     "scene": {"pixel_sigma": 0.0}, "imu": {"noise": {"enabled": False}},
                     "init": init})
    rep, _ = run_montecarlo(cfg)
    for name, curve in rep.rmse.items():
        if name not in ("position", "orientation"):
            assert not curve.any(), name          # zero prior variance locks every parameter
    # what remains is the discretization of 100 Hz samples
    assert np.nanmax(rep.rmse["position"]) < 0.02
    assert np.nanmax(rep.rmse["orientation"]) < 1e-3
    # the zero initial covariance makes the first epoch undefined, not an error
    assert np.isnan(rep.nees["orientation"][0])
    assert np.isfinite(rep.nees["orientation"][1:]).all()
