"""Run configuration: plain-text key=value files with section prefixes.

Every tunable constant of the pipeline lives here under a dotted key
(e.g. solver.max_iters_ba).  Files are parsed against the typed defaults
below; unknown keys are rejected by name so typos fail loudly.  A separate
tiny calibration file carries (lambda_w, sigma_rep, sigma_photo) produced
by the weight-calibration routine.
"""

from .errors import ConfigError, IoFailure
from .geometry import PinholeCamera

# typed defaults: the value's Python type drives parsing
DEFAULTS = {
    "camera.fx": 460.0,
    "camera.fy": 460.0,
    "camera.cx": 319.5,
    "camera.cy": 239.5,
    "camera.width": 640,
    "camera.height": 480,
    "image.pyramid_levels": 3,
    "solver.max_iters_track": 30,
    "solver.max_iters_ba": 50,
    "solver.huber_point": 2.0,
    "solver.huber_text": 1.345,
    "tracking.lambda_w": 25.0,
    "tracking.sigma_rep": 1.0,
    "tracking.min_support": 4,
    "keyframe.tracked_ratio": 0.7,    # new keyframe when tracked count drops
    "keyframe.parallax_px": 15.0,     # ... or median parallax exceeds this
    "keyframe.max_gap": 15,           # ... or this many frames elapsed
    "map.local_window": 7,
    "map.cull_fail_ratio": 0.3,       # point culled above this gate-fail rate
    "text.n_min": 5,
    "text.candidate_cap": 10,         # keyframes without init -> rejected
    "text.parallax_floor_px": 2.0,
    "run.seed": 0,
    "run.calibration_file": "",
}

_BOOLS = {"true": True, "false": False, "1": True, "0": False}


def _parse_value(key, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOLS:
                raise ValueError(raw)
            return _BOOLS[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e


class RunConfig:
    """Validated configuration with attribute-style dotted access."""

    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = val

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def camera(self):
        return PinholeCamera(fx=self["camera.fx"], fy=self["camera.fy"],
                             cx=self["camera.cx"], cy=self["camera.cy"],
                             width=self["camera.width"],
                             height=self["camera.height"])

    def tracker_config(self):
        from .estimation import TrackerConfig
        return TrackerConfig(lambda_w=self["tracking.lambda_w"],
                             sigma_rep=self["tracking.sigma_rep"],
                             huber_point=self["solver.huber_point"],
                             huber_text=self["solver.huber_text"],
                             max_iters_track=self["solver.max_iters_track"],
                             max_iters_ba=self["solver.max_iters_ba"],
                             min_support=self["tracking.min_support"])

    def to_text(self):
        return "".join(f"{k} = {self._values[k]}\n"
                       for k in sorted(self._values))


def parse_config_text(text):
    """RunConfig from key = value lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw, DEFAULTS[key])
    return RunConfig(values)


def load_config(path):
    try:
        with open(path) as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise IoFailure(str(e)) from e


def write_config(path, config):
    try:
        with open(path, "w") as f:
            f.write(config.to_text())
    except OSError as e:
        raise IoFailure(str(e)) from e


# ---------------------------------------------------------------------------
# calibration file: output of calibrate_lambda_w

_CAL_KEYS = ("lambda_w", "sigma_rep", "sigma_photo")


def write_calibration(path, lambda_w, sigma_rep, sigma_photo):
    try:
        with open(path, "w") as f:
            f.write(f"lambda_w = {lambda_w!r}\n")
            f.write(f"sigma_rep = {sigma_rep!r}\n")
            f.write(f"sigma_photo = {sigma_photo!r}\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def read_calibration(path):
    """(lambda_w, sigma_rep, sigma_photo) from a calibration file."""
    values = {}
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _CAL_KEYS:
            raise ConfigError(f"line {lineno}: unknown calibration key {key!r}")
        values[key] = _parse_value(key, raw, 0.0)
    missing = [k for k in _CAL_KEYS if k not in values]
    if missing:
        raise ConfigError(f"calibration file missing keys: {missing}")
    return tuple(values[k] for k in _CAL_KEYS)
