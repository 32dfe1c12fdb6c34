"""Experiment configuration: one JSON document covering simulation, network, training and evaluation.

Structure is checked against :data:`SCHEMA`; value invariants are checked by the
dataclasses the sections are turned into.  The network's depth and channel
count always follow the simulator's ``D`` and ``C``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .gpr_sim import INTERFERENCE_KINDS, SimConfig
from .network import EdeBlockConfig, NetConfig, preset
from .training import TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "edenet experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "sim", "net", "train", "eval"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{f.name: _num for f in fields(SimConfig) if f.name not in ("D", "C", "seed")},
                "D": _int, "C": _int,
                "n_locations": _int,
                "map_epsilon": _num, "query_epsilon": _num, "query_noise": _num,
                "interference": {"enum": list(INTERFERENCE_KINDS)},
                "density": _num,
            },
        },
        "net": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["default", "four_scale", "tiny", "experiment"]},
                "descriptor_dim": _int, "reduction": _int, "window": _int,
                "scales": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object", "additionalProperties": False, "required": ["K", "k"],
                        "properties": {n: _int for n in ("K", "k", "shift_channels", "pool_window",
                                                         "pool_stride", "shift_kernel")},
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "margin": _num, "learning_rate": _num, "negatives": _int, "epochs": _int,
                "batch_queries": _int, "max_steps": {"type": ["integer", "null"]},
                "pos_radius": _num, "train_fraction": _num,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "dist_thresh": _num,
            },
        },
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    n_locations: int = 50
    map_epsilon: float = 4.0
    query_epsilon: float = 5.0
    query_noise: float = 0.3
    interference: str = "gaussian"
    density: float = 1.0

    def __post_init__(self):
        if self.n_locations < 2:
            raise ConfigError("n_locations must be >= 2")
        if self.map_epsilon < 1 or self.query_epsilon < 1:
            raise ConfigError("relative permittivities must be >= 1")
        if self.query_noise < 0 or self.density < 0:
            raise ConfigError("query_noise and density must be >= 0")
        if self.interference not in INTERFERENCE_KINDS:
            raise ConfigError(f"unknown interference kind {self.interference!r}")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    dist_thresh: float = 3.0

    def __post_init__(self):
        if not self.ks or min(self.ks) < 1 or not self.dist_thresh > 0:
            raise ConfigError("eval.ks must be positive and eval.dist_thresh > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    sim: SimConfig
    dataset: DatasetConfig
    net: NetConfig
    train: TrainConfig
    eval: EvalConfig
    raw: dict

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _split(section: dict, cls) -> tuple[dict, dict]:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in section.items() if k in names}, {k: v for k, v in section.items() if k not in names}


def from_dict(doc: dict) -> ExperimentConfig:
    """Validate and build; raises :class:`ConfigError` on any violation."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    try:
        seed = doc["seed"]
        sim_kw, data_kw = _split(doc["sim"], SimConfig)
        sim = SimConfig(**sim_kw, seed=seed)
        dataset = DatasetConfig(**data_kw)
        net_doc = dict(doc["net"])
        base = preset(net_doc.pop("preset", "experiment"))
        if "scales" in net_doc:
            net_doc["scales"] = tuple(EdeBlockConfig(**s) for s in net_doc["scales"])
        net = NetConfig(**{**base.__dict__, **net_doc, "depth": sim.D, "channels": sim.C})
        train = TrainConfig(**doc["train"], seed=seed)
        ev = doc["eval"]
        evc = EvalConfig(tuple(ev.get("ks", (1, 5, 10))), ev.get("dist_thresh", 3.0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    for name, v in (("sim.beamwidth", sim.beamwidth),):
        if not math.isfinite(v):
            raise ConfigError(f"{name} must be finite")
    return ExperimentConfig(seed, sim, dataset, net, train, evc, copy.deepcopy(doc))


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc)


BUILTIN: dict[str, dict] = {
    "experiment": {
        "seed": 0,
        "sim": {"D": 64, "C": 3, "dx": 1.0, "n_locations": 50, "map_epsilon": 4.0,
                "query_epsilon": 5.0, "query_noise": 0.3, "interference": "gaussian"},
        "net": {"preset": "experiment"},
        "train": {"learning_rate": 1e-3, "epochs": 1000, "max_steps": 500},
        "eval": {"ks": [1, 5, 10], "dist_thresh": 3.0},
    },
    "tiny": {
        "seed": 0,
        "sim": {"D": 16, "C": 2, "time_bin": 2.0, "n_locations": 50, "map_epsilon": 4.0,
                "query_epsilon": 5.0, "query_noise": 0.3},
        "net": {"preset": "tiny"},
        "train": {"epochs": 1000, "max_steps": 200},
        "eval": {"ks": [1, 5, 10], "dist_thresh": 3.0},
    },
}


def builtin(name: str) -> ExperimentConfig:
    if name not in BUILTIN:
        raise ConfigError(f"unknown builtin config {name!r}; choose from {sorted(BUILTIN)}")
    return from_dict(copy.deepcopy(BUILTIN[name]))
