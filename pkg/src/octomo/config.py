"""Run configuration: typed INI sections with presets and overrides.

Precedence, lowest to highest: built-in defaults, preset, config file,
``--set section.key=value`` overrides. Unknown sections or keys are
rejected. The effective configuration is written back out as INI, and
reading that file reproduces it exactly.
"""

from __future__ import annotations

import configparser
import copy
import io
import math

from .errors import ConfigurationError

SPARSE_VIEW = "sparse_view"
LIMITED_ANGLE = "limited_angle"
FULL = "full"
PRESETS = (SPARSE_VIEW, LIMITED_ANGLE, FULL)

# section -> key -> default (the default's type is the key's type)
SCHEMA = {
    "data": {
        "preset": SPARSE_VIEW,
        "phantom": "blobs",
        "resolution": 64,
        "n_views": 25,
        "angular_range_deg": 360.0,
        "start_angle_deg": 0.0,
        "radius": 2.0,
        "detector_width": 128,
        "detector_height": 128,
        "noise_sigma_rel": 0.02,
        "test_fraction": 0.2,
        "exposure_jitter": 0.0,
        "bias_jitter": 0.0,
        "seed": 0,
    },
    "model": {
        "grid": 17,
        "features": 8,
        "hidden": 64,
        "init_depth": 2,
        "max_depth": 8,
        "n_samples": 16,
        "decoder": "mlp",
        "feature_std": 0.01,
        "feature_mean": 0.0,
        "output_bias": -1.0,
        "dtype": "float32",
    },
    "train": {
        "epochs": 40,
        "batch_rays": 4096,
        "rays_per_epoch": 0,
        "sampling": "stratified",
        "lr_features": 1e-2,
        "lr_decoder": 1e-3,
        "lr_poses": 1e-4,
        "lr_radiometry": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "seed": 0,
        "threads": 1,
        "checkpoint_every": 0,
        "eval_every": 0,
    },
    "loss": {
        "lambda_tv": 2e-5,
        "lambda_bc": 0.01,
        "tv_variant": "features",
        "bc_points": 5,
    },
    "refine": {
        "enabled": True,
        "max_leaves": 1024,
        "alpha": 0.25,
        "cull": True,
        "tau_rel": 0.01,
        "error_floor": 0.0,
        "window": 5,
        "threshold": 0.005,
        "milestones": "",
        "max_refinements": 0,
    },
    "calib": {
        "geometric": False,
        "exposure": False,
        "bias": False,
        "response": False,
        "background": False,
        "per_view_background": False,
        "background_res": 8,
        "n_knots": 16,
        "warmup_epochs": 2,
        "pose_noise_rot": 0.0,
        "pose_noise_trans": 0.0,
        "pose_noise_seed": 0,
    },
}

PRESET_VALUES = {
    SPARSE_VIEW: {"data": {"n_views": 25, "angular_range_deg": 360.0}, "loss": {"lambda_tv": 2e-5}},
    LIMITED_ANGLE: {"data": {"n_views": 25, "angular_range_deg": 120.0}, "loss": {"lambda_tv": 1e-4}},
    FULL: {"data": {"n_views": 60, "angular_range_deg": 360.0}, "loss": {"lambda_tv": 2e-5}},
}

CHOICES = {
    ("data", "preset"): PRESETS,
    ("data", "phantom"): ("shepp_logan_3d", "blobs", "box_octant", "nested_shells"),
    ("model", "decoder"): ("mlp", "identity"),
    ("model", "dtype"): ("float32", "float64"),
    ("train", "sampling"): ("stratified", "uniform"),
    ("loss", "tv_variant"): ("features", "decoded"),
}


def _parse(section, key, text):
    default = SCHEMA[section][key]
    try:
        if isinstance(default, bool):
            low = str(text).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(str(text).strip())
        if isinstance(default, float):
            v = float(str(text).strip())
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        return str(text).strip()
    except ValueError:
        raise ConfigurationError(f"{section}.{key}: cannot parse {text!r} as {type(default).__name__}") from None


class RunConfig:
    """Nested ``{section: {key: value}}`` configuration with attribute access by section."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(SCHEMA)
        if values:
            for sec, kv in values.items():
                for k, v in kv.items():
                    self.set(sec, k, v)

    def __getattr__(self, name):
        if name != "values" and name in self.values:
            return _Section(self.values[name])
        raise AttributeError(name)

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        if isinstance(value, str):
            v = _parse(section, key, value)
        elif isinstance(value, float):
            v = _parse(section, key, repr(value))
        else:
            v = _parse(section, key, str(value))
        allowed = CHOICES.get((section, key))
        if allowed is not None and v not in allowed:
            raise ConfigurationError(f"{section}.{key} must be one of {allowed}, got {v!r}")
        self.values[section][key] = v

    def apply_preset(self, name):
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}")
        self.values["data"]["preset"] = name
        for sec, kv in PRESET_VALUES[name].items():
            for k, v in kv.items():
                self.values[sec][k] = v

    def apply_overrides(self, items):
        """``section.key=value`` strings."""
        for item in items or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
            lhs, rhs = item.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            self.set(sec, key, rhs)

    def validate(self):
        v = self.values
        pos = [("model", "grid", 2), ("model", "features", 1), ("model", "n_samples", 1), ("train", "batch_rays", 1),
               ("refine", "max_leaves", 1), ("data", "n_views", 1), ("data", "resolution", 8),
               ("refine", "window", 1), ("calib", "background_res", 2), ("calib", "n_knots", 1)]
        for sec, key, lo in pos:
            if v[sec][key] < lo:
                raise ConfigurationError(f"{sec}.{key} must be >= {lo}")
        for sec, key in (("train", "epochs"), ("loss", "lambda_tv"), ("loss", "lambda_bc"), ("refine", "tau_rel"),
                         ("calib", "warmup_epochs"), ("data", "noise_sigma_rel"), ("refine", "error_floor"),
                         ("calib", "pose_noise_rot"), ("calib", "pose_noise_trans"), ("model", "init_depth")):
            if v[sec][key] < 0:
                raise ConfigurationError(f"{sec}.{key} must be >= 0")
        if not 0 <= v["data"]["test_fraction"] < 1:
            raise ConfigurationError("data.test_fraction must lie in [0, 1)")
        if not 0 <= v["refine"]["alpha"] < 1:
            raise ConfigurationError("refine.alpha must lie in [0, 1)")
        if not 0 < v["data"]["angular_range_deg"] <= 360:
            raise ConfigurationError("data.angular_range_deg must lie in (0, 360]")
        if v["model"]["init_depth"] > v["model"]["max_depth"] or v["model"]["max_depth"] > 8:
            raise ConfigurationError("need init_depth <= max_depth <= 8")
        if v["model"]["decoder"] == "identity" and v["model"]["features"] != 1:
            raise ConfigurationError("the identity decoder needs model.features = 1")
        self.milestones()
        return self

    def milestones(self):
        text = self.values["refine"]["milestones"].strip()
        if not text:
            return ()
        try:
            return tuple(int(x) for x in text.replace(",", " ").split())
        except ValueError:
            raise ConfigurationError(f"refine.milestones: bad list {text!r}") from None

    # -- serialization --------------------------------------------------------

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for sec, kv in self.values.items():
            cp[sec] = {k: (repr(v) if isinstance(v, float) else str(v)) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return copy.deepcopy(self.values)

    @classmethod
    def from_dict(cls, d):
        return cls(d)

    @classmethod
    def from_ini(cls, text, preset=None):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigurationError(f"cannot parse config: {e}") from None
        cfg = cls()
        p = preset or (cp.get("data", "preset") if cp.has_option("data", "preset") else None)
        if p:
            cfg.apply_preset(p.strip())
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigurationError(f"unknown config section [{sec}]")
            for key, val in cp.items(sec):
                cfg.set(sec, key, val)
        return cfg

    @classmethod
    def load(cls, path=None, preset=None, overrides=()):
        if path is None:
            cfg = cls()
            cfg.apply_preset(preset or SPARSE_VIEW)
        else:
            with open(path) as fh:
                cfg = cls.from_ini(fh.read(), preset)
        cfg.apply_overrides(overrides)
        return cfg.validate()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


class _Section:
    def __init__(self, d):
        self.__dict__["_d"] = d

    def __getattr__(self, k):
        try:
            return self._d[k]
        except KeyError:
            raise AttributeError(k) from None
