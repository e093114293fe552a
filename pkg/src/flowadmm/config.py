"""Flat dotted-key JSON run configurations and the shipped presets.

A config file is one JSON object such as::

    {"preset": "celeba-deblurring-desk", "solver.tau": 1.0, "seed": 3}

``preset`` (optional) names a base preset whose keys are overridden by the
rest of the file.  Every accepted key, its type, and its default is listed in
``config_schema.json`` next to this module.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .bench import MethodSpec, TaskSpec, synthetic_images
from .errors import ConfigError, FlowAdmmError
from .flow_prior import GaussianPrior, GmmPrior, MlpVelocity
from .operators import TaskOpSpec
from .renoise import SampleSchedule, TimeSchedule
from .solvers import PnpFlowConfig, SolverConfig

__all__ = ["PRESETS", "RunConfig", "load_config", "load_schema", "parse_config"]


def load_schema():
    text = resources.files("flowadmm").joinpath("config_schema.json").read_text()
    return json.loads(text)


SCHEMA = load_schema()["keys"]
DEFAULTS = {k: v["default"] for k, v in SCHEMA.items()}

_TYPES = {
    "int": (int,),
    "float": (int, float),
    "str": (str,),
    "bool": (bool,),
    "float_list": (list,),
    "method_list": (list,),
    "str_or_null": (str, type(None)),
    "int_or_null": (int, type(None)),
}


def _three_phase(n_e, n_m, n_l, s1, s2):
    return {"samples.kind": "three_phase", "samples.N_e": n_e, "samples.N_m": n_m,
            "samples.N_l": n_l, "samples.s1": s1, "samples.s2": s2}


def _const(n):
    return {"samples.kind": "constant", "samples.N": n}


_TASK_KEYS = {
    "denoising": {"task.kind": "identity", "task.noise_sigma": 0.2},
    "deblurring": {"task.kind": "gaussian_blur", "task.kernel_size": 15, "task.noise_sigma": 0.05},
    "sr": {"task.kind": "subsample", "task.noise_sigma": 0.05},
    "random-inpainting": {"task.kind": "bernoulli_mask", "task.missing_prob": 0.7,
                          "task.mask_seed": 1234, "task.noise_sigma": 0.01},
    "box-inpainting": {"task.kind": "box_mask", "task.noise_sigma": 0.05},
}

# (dataset-specific task keys, K, tau, t_min, t_max, gamma, samples, pnp alpha)
_ROWS = {
    "celeba": {
        "denoising": ({}, 100, 5.0, 0.5, 0.95, 1.0, _three_phase(1, 1, 41, 0.5, 0.9), 0.8),
        "deblurring": ({"task.sigma_blur": 1.0}, 100, 0.5, 0.5, 0.95, 0.5,
                       _three_phase(1, 1, 41, 0.5, 0.9), 0.01),
        "sr": ({"task.stride": 2}, 100, 0.5, 0.3, 0.95, 1.0, _three_phase(1, 3, 35, 0.6, 0.9), 0.3),
        "random-inpainting": ({}, 100, 0.25, 0.3, 0.95, 0.5, _three_phase(1, 4, 29, 0.5, 0.9), 0.01),
        "box-inpainting": ({"task.half_size": 5}, 100, 1.0, 0.1, 0.95, 2.0,
                           _three_phase(1, 4, 35, 0.7, 0.9), 0.5),
    },
    "afhq": {
        "denoising": ({}, 100, 5.0, 0.5, 0.95, 1.0, _three_phase(1, 1, 41, 0.5, 0.9), 0.8),
        "deblurring": ({"task.sigma_blur": 3.0}, 100, 0.25, 0.5, 0.95, 0.5, _const(5), 0.01),
        "sr": ({"task.stride": 4}, 500, 0.25, 0.3, 0.95, 1.0, _three_phase(1, 4, 29, 0.5, 0.9), 0.01),
        "random-inpainting": ({}, 200, 0.125, 0.3, 0.95, 0.5, _three_phase(1, 3, 33, 0.5, 0.9), 0.01),
        "box-inpainting": ({"task.half_size": 10}, 100, 0.5, 0.1, 0.9, 2.0,
                           _three_phase(1, 3, 19, 0.6, 0.8), 0.5),
    },
}

# Data penalties re-selected for the GMM prior on the synthetic corpus: best
# mean PSNR over tau in {0.125, 0.25, 0.5, 1, 2, 5, 10} on 16 validation
# images (corpus seed 2000), other settings as in the celeba rows.
SYNTHETIC_TAU = {"denoising": 0.125, "deblurring": 1.0, "sr": 2.0,
                 "random-inpainting": 2.0, "box-inpainting": 1.0}


def _build_presets():
    presets = {}
    for dataset, rows in _ROWS.items():
        for task, (extra, K, tau, t_min, t_max, gamma, samples, alpha) in rows.items():
            keys = {"task.name": task, **_TASK_KEYS[task], **extra,
                    "solver.K": K, "solver.tau": tau, "schedule.t_min": t_min,
                    "schedule.t_max": t_max, "schedule.gamma": gamma, "pnp.alpha": alpha,
                    "pnp.K": K, **samples}
            presets[f"{dataset}-{task}-desk"] = keys
    for task, tau in SYNTHETIC_TAU.items():
        presets[f"synthetic-{task}-desk"] = {**presets[f"celeba-{task}-desk"], "solver.tau": tau}
    presets["celeba-sr8-desk"] = {
        "task.name": "sr8", **_TASK_KEYS["sr"], "task.stride": 8, "solver.K": 100,
        "solver.tau": 0.1, "schedule.t_min": 0.2, "schedule.t_max": 0.95,
        "schedule.gamma": 1.0, **_three_phase(1, 3, 35, 0.6, 0.9),
        "pnp.K": 100, "pnp.lr": 2.0, "pnp.alpha": 0.001,
    }
    return presets


PRESETS = _build_presets()


def _line_of(text, key):
    if text is None:
        return None
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return lineno
    return None


def _where(text, key):
    line = _line_of(text, key)
    return f" (line {line})" if line else ""


def _check_value(key, value, text):
    kind = SCHEMA[key]["type"]
    ok = isinstance(value, _TYPES[kind]) and not (kind in ("int", "float") and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"config key {key!r}{_where(text, key)}: expected {kind}, got {value!r}")
    choices = SCHEMA[key].get("choices")
    if choices and value not in choices:
        raise ConfigError(f"config key {key!r}{_where(text, key)}: {value!r} not in {choices}")


def _merge(raw, text=None):
    for key in raw:
        if key != "preset" and key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}{_where(text, key)}")
    values = dict(DEFAULTS)
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}{_where(text, 'preset')}")
        values.update(PRESETS[preset])
    for key, value in raw.items():
        if key == "preset":
            continue
        _check_value(key, value, text)
        values[key] = value
    values["preset"] = preset
    return values


class RunConfig:
    """Validated flat configuration with builders for the run objects."""

    def __init__(self, values, text=None):
        self.values = values
        self._text = text
        try:
            self.task_spec()
            self.solver_config()
            if self["solver.kind"] == "pnpflow":
                self.pnp_config()
        except FlowAdmmError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides):
        raw = {k: v for k, v in self.values.items() if k != "preset"}
        raw.update(overrides)
        merged = dict(DEFAULTS)
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}{_where(self._text, key)}")
            _check_value(key, value, self._text)
            merged[key] = value
        merged["preset"] = self.values.get("preset")
        return RunConfig(merged, self._text)

    @property
    def seed(self):
        return int(self["seed"])

    @property
    def shape(self):
        size = int(self["data.size"])
        return (size, size)

    def task_spec(self):
        op = TaskOpSpec(
            kind=self["task.kind"], kernel_size=self["task.kernel_size"],
            sigma_blur=float(self["task.sigma_blur"]), stride=self["task.stride"],
            half_size=self["task.half_size"], missing_prob=float(self["task.missing_prob"]),
            mask_seed=self["task.mask_seed"],
        )
        seed = self["task.seed"] if self["task.seed"] is not None else self.seed
        return TaskSpec(self["task.name"], op, float(self["task.noise_sigma"]), seed)

    def time_schedule(self, K=None):
        return TimeSchedule(float(self["schedule.t_min"]), float(self["schedule.t_max"]),
                            float(self["schedule.gamma"]), int(K or self["solver.K"]))

    def sample_schedule(self):
        if self["samples.kind"] == "constant":
            return SampleSchedule.constant(self["samples.N"])
        return SampleSchedule.three_phase(self["samples.N_e"], self["samples.N_m"],
                                          self["samples.N_l"], float(self["samples.s1"]),
                                          float(self["samples.s2"]))

    def solver_config(self):
        return SolverConfig(
            tau=float(self["solver.tau"]), K=int(self["solver.K"]), times=self.time_schedule(),
            samples=self.sample_schedule(), estimator=self["solver.estimator"], seed=self.seed,
            snapshot_every=int(self["solver.snapshot_every"]), prox=self["solver.prox"],
        )

    def pnp_config(self):
        K = int(self["pnp.K"])
        samples = (SampleSchedule.constant(self["pnp.N"]) if self["pnp.samples"] == "constant"
                   else self.sample_schedule())
        return PnpFlowConfig(
            lr=float(self["pnp.lr"]), K=K, times=np.arange(K) / K, samples=samples,
            alpha=float(self["pnp.alpha"]), estimator=self["solver.estimator"], seed=self.seed,
            snapshot_every=int(self["solver.snapshot_every"]),
        )

    def method(self, name=None):
        name = name or self["solver.kind"]
        if self["solver.kind"] == "flowadmm":
            return MethodSpec(name, "flowadmm", self.solver_config())
        return MethodSpec(name, "pnpflow", self.pnp_config())

    def methods(self):
        entries = self["bench.methods"] or [{"name": "flowadmm", "solver.kind": "flowadmm"},
                                             {"name": "pnpflow", "solver.kind": "pnpflow"}]
        out = []
        for entry in entries:
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError(f"bench.methods entries need a 'name'{_where(self._text, 'bench.methods')}")
            overrides = {k: v for k, v in entry.items() if k != "name"}
            out.append(self.with_overrides(overrides).method(entry["name"]))
        return out

    def build_prior(self, shape=None):
        shape = tuple(shape or self.shape)
        kind = self["prior.kind"]
        if kind == "gaussian":
            return GaussianPrior(np.full(shape, float(self["prior.mean"])), float(self["prior.var"]))
        if kind == "gmm":
            if len(shape) != 2 or shape[0] != shape[1]:
                raise ConfigError(f"gmm prior is fitted on square single-channel images, not {shape}")
            train = synthetic_images(int(self["prior.train_images"]), shape[0],
                                     int(self["prior.train_seed"]))
            return GmmPrior.fit(train, int(self["prior.components"]), seed=int(self["prior.train_seed"]))
        if self["prior.path"] is None:
            raise ConfigError("prior.kind 'mlp' needs prior.path")
        model = MlpVelocity.load(self["prior.path"])
        if tuple(model.shape) != shape:
            raise ConfigError(f"mlp prior has shape {model.shape}, data has {shape}")
        return model


def parse_config(text, source="<config>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return RunConfig(_merge(raw, text), text)


def load_config(path=None, seed=None):
    """Parse a config file (or defaults when ``path`` is None); ``seed`` overrides ``seed``."""
    if path is None:
        text = "{}"
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    cfg = parse_config(text, str(path or "<defaults>"))
    if seed is not None:
        cfg = cfg.with_overrides({"seed": int(seed)})
    return cfg
