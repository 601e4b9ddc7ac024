import pytest

from textvo.config import (RunConfig, load_config, parse_config_text,
                           read_calibration, write_calibration, write_config)
from textvo.errors import ConfigError, IoFailure


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "run.cfg"
    write_config(path, cfg)
    back = load_config(path)
    assert back.to_text() == cfg.to_text()


def test_parse_overrides_and_comments():
    cfg = parse_config_text(
        "tracking.lambda_w = 10.5  # calibrated\n"
        "\n"
        "solver.max_iters_ba = 80\n")
    assert cfg["tracking.lambda_w"] == 10.5
    assert cfg["solver.max_iters_ba"] == 80
    assert cfg["solver.max_iters_track"] == 30   # untouched default


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("solver.max_itters = 5\n")
    assert "solver.max_itters" in str(exc.value)


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("solver.max_iters_ba = soon\n")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("solver.max_iters_ba 5\n")


def test_camera_and_tracker_builders():
    cfg = parse_config_text("camera.fx = 500.0\ntracking.lambda_w = 3.0\n")
    cam = cfg.camera()
    assert cam.fx == 500.0 and cam.width == 640
    tc = cfg.tracker_config()
    assert tc.lambda_w == 3.0
    assert tc.max_iters_ba == 50


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_config(tmp_path / "absent.cfg")


def test_calibration_round_trip(tmp_path):
    path = tmp_path / "cal.txt"
    write_calibration(path, 12.5, 1.0, 0.08)
    lam, s_rep, s_photo = read_calibration(path)
    assert (lam, s_rep, s_photo) == (12.5, 1.0, 0.08)


def test_calibration_missing_key(tmp_path):
    path = tmp_path / "cal.txt"
    path.write_text("lambda_w = 5.0\n")
    with pytest.raises(ConfigError):
        read_calibration(path)


def test_calibration_unknown_key(tmp_path):
    path = tmp_path / "cal.txt"
    path.write_text("lambda_w = 5.0\nsigma_rep = 1.0\nsigma_photo = 0.1\n"
                    "extra = 2\n")
    with pytest.raises(ConfigError) as exc:
        read_calibration(path)
    assert "extra" in str(exc.value)
