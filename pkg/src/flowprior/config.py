"""Experiment configuration: one JSON document, merged over defaults."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .operators import LinearOperator, blur, downsample, identity, make_center_mask, random_mask
from .solvers import SolverConfig
from .training import TrainConfig

LAMBDA_SWEEP = [1e-5, 10**-4.5, 1e-4, 10**-3.5, 1e-3]

TASK_PRESETS = {
    "deblur": {"kind": "deblur", "kernel": 7, "noise_sigma": 0.01},
    "sr2": {"kind": "sr", "factor": 2, "noise_sigma": 0.0},
    "sr4": {"kind": "sr", "factor": 4, "noise_sigma": 0.0},
    "inpaint_random": {"kind": "inpaint_random", "fraction": 0.6, "noise_sigma": 0.0},
    "inpaint_center": {"kind": "inpaint_center", "side_fraction": 1 / 3, "noise_sigma": 0.0},
    "denoise": {"kind": "denoise", "noise_sigma": 0.01},
}
DEFAULT_TASKS = ["deblur", "sr2", "sr4", "inpaint_random", "inpaint_center"]


class ConfigError(ValueError):
    pass


def derive_seed(seed, *keys):
    """Independent 32-bit seed for a named sub-stream of ``seed``."""
    # a leading 1 byte keeps keys that differ only in trailing NULs apart
    words = [int(seed)] + [int.from_bytes(b"\x01" + str(k).encode(), "big") for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def make_task(name, **overrides):
    if name not in TASK_PRESETS:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASK_PRESETS)}")
    return {"name": name, **TASK_PRESETS[name], **overrides}


def task_operator(task, shape, seed) -> LinearOperator:
    """Build the forward operator of ``task`` for images of ``shape``."""
    kind = task.get("kind")
    if kind == "deblur":
        return blur(shape, int(task.get("kernel", 7)))
    if kind == "sr":
        return downsample(shape, int(task["factor"]))
    if kind == "inpaint_random":
        mask_seed = task.get("mask_seed")
        if mask_seed is None:
            mask_seed = derive_seed(seed, "mask", task["name"])
        return random_mask(shape, float(task.get("fraction", 0.6)), int(mask_seed))
    if kind == "inpaint_center":
        return make_center_mask(shape, float(task.get("side_fraction", 1 / 3)))
    if kind == "denoise":
        return identity(shape)
    raise ConfigError(f"unknown task kind {kind!r}")


def _solver_defaults():
    return asdict(SolverConfig(max_iters=500))


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: {"n_blocks": 2, "n_steps": 8, "hidden": 16, "checkpoint": None})
    dataset: dict = field(default_factory=lambda: {
        "source": "synthetic", "n": 100, "shape": [3, 16, 16], "levels": 256, "directory": None,
    })
    train: dict = field(default_factory=lambda: {
        k: v for k, v in asdict(TrainConfig()).items() if k not in ("seed",)
    })
    tasks: list = field(default_factory=lambda: [make_task(n) for n in DEFAULT_TASKS])
    solver: dict = field(default_factory=lambda: {"synthesis": _solver_defaults(), "analysis": _solver_defaults()})
    lambda_sweep: list = field(default_factory=lambda: list(LAMBDA_SWEEP))
    n_eval: int = 15
    n_figure: int = 3

    def validate(self):
        shape = tuple(self.dataset["shape"])
        if len(shape) != 3:
            raise ConfigError(f"dataset.shape must have 3 entries, got {list(shape)}")
        for task in self.tasks:
            try:
                task_operator(task, shape, self.seed)
            except (KeyError, ValueError) as err:
                raise ConfigError(f"task {task.get('name')!r} does not fit images of shape {shape}: {err}") from err
        if not self.lambda_sweep or any(lam < 0 for lam in self.lambda_sweep):
            raise ConfigError("lambda_sweep must be a non-empty list of non-negative values")
        if self.n_figure > self.n_eval:
            raise ConfigError("n_figure cannot exceed n_eval")
        for name in ("synthesis", "analysis"):
            self.solver_config(name)
        self.train_config()
        return self

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": self.seed})
        except (TypeError, ValueError) as err:
            raise ConfigError(f"train: {err}") from err

    def solver_config(self, formulation) -> SolverConfig:
        try:
            return SolverConfig(**{**self.solver[formulation], "seed": self.seed})
        except (TypeError, ValueError) as err:
            raise ConfigError(f"solver.{formulation}: {err}") from err

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.dumps() + "\n")


def _merge(base, update, where):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key not in ("solver",):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        elif key == "solver":
            for form, over in value.items():
                if form not in out["solver"]:
                    raise ConfigError(f"unknown formulation solver.{form}")
                out["solver"][form] = _merge(out["solver"][form], over, f"solver.{form}.")
        else:
            out[key] = value
    return out


def config_from_dict(data) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    merged = _merge(base, data, "")
    merged["tasks"] = [
        make_task(t) if isinstance(t, str) else make_task(t["name"], **{k: v for k, v in t.items() if k != "name"})
        for t in merged["tasks"]
    ]
    names = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in merged.items() if k in names}).validate()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
