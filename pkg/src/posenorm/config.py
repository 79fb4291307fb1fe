"""Run configuration: a JSON file of sections, merged over documented defaults.

Unknown sections or keys are rejected.  A single top-level ``seed`` feeds every
random component.
"""

import copy
import json
import math
from dataclasses import dataclass

from .errors import ConfigError
from .metrics import EvalConfig
from .refine import TrainConfig
from .scoremap import GroundtruthSpec
from .synthdata import NoiseSpec, PoseSamplerConfig

DEFAULTS = {
    "seed": 0,
    "skeleton": "lsp14",
    "canvas": [64, 64],
    "groundtruth": {"mode": "gaussian", "gauss_sigma": 1.5, "radius_factor": 0.15, "min_radius": 1.0},
    "sampler": {"global_rotation": [-math.pi, math.pi], "occlusion_prob": 0.1, "margin": 2.0},
    "noise": {"jitter_sigma": 2.0, "amplitude_noise": 0.1, "false_peak_prob": 0.2,
              "false_peak_gain": 1.3},
    "train": {"steps": 2000, "lr": 0.1, "fine_tune_lr": 0.0002, "fine_tune_steps": 0,
              "momentum": 0.9, "init_variance": 0.001, "width": 16, "loss_reduction": "mean"},
    "eval": {"alpha": 0.2, "ref_mode": "torso", "auc_range": [0.0, 0.5], "auc_step": 0.01},
    "paths": {"corpus": None, "out": "out"},
}


def _merge(base, override, where):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_dict(cls, d=None):
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, d or {}, ""))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls.from_dict()
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc.msg} (line {exc.lineno})") from exc
        return cls.from_dict(data)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return int(self.values["seed"])

    def with_seed(self, seed):
        v = copy.deepcopy(self.values)
        v["seed"] = int(seed)
        return RunConfig(v)

    def check(self):
        if self.values["skeleton"] != "lsp14":
            raise ConfigError(f"unsupported skeleton {self.values['skeleton']!r}")
        if not isinstance(self.values["seed"], int) or self.values["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.sampler_config()
            self.noise_spec()
            self.gt_spec()
            self.train_config()
            self.eval_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc

    def sampler_config(self):
        s = self.values["sampler"]
        return PoseSamplerConfig(canvas=tuple(self.values["canvas"]),
                                 angles={"global_rotation": tuple(s["global_rotation"])},
                                 margin=float(s["margin"]), occlusion_prob=float(s["occlusion_prob"]),
                                 seed=self.seed)

    def noise_spec(self):
        return NoiseSpec(**{k: float(v) for k, v in self.values["noise"].items()}, seed=self.seed)

    def gt_spec(self):
        return GroundtruthSpec(**self.values["groundtruth"])

    def train_config(self):
        return TrainConfig(**self.values["train"], seed=self.seed)

    def eval_config(self):
        e = self.values["eval"]
        return EvalConfig(alpha=float(e["alpha"]), ref_mode=e["ref_mode"],
                          auc_range=tuple(e["auc_range"]), auc_step=float(e["auc_step"]))
