"""Experiment configuration: YAML loading, schema validation and object construction."""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import channel as chn
from .control import LqWeights
from .errors import DomainError
from .mjls import MjlsModel
from .plant import DiscretePlant, PendulumParams, pendulum_plant
from .sim import SimConfig

FIXTURE_ENV = "WNCS_FIXTURE_DIR"

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "plant", "channel", "weights"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "aliases": {"type": "array", "items": {"type": "string"}},
        "plant": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["model"],
                    "properties": {
                        "model": {"const": "pendulum"},
                        "ts": {"type": "number", "exclusiveMinimum": 0},
                        "params": {
                            "type": "object",
                            "additionalProperties": False,
                            "properties": {k: _NUM for k in (
                                "cart_mass", "pend_mass", "inertia", "com_distance",
                                "friction", "gravity")},
                        },
                        "noise_std": _VEC,
                        "sigma_w": _MAT,
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["model", "a", "b", "sigma_w"],
                    "properties": {
                        "model": {"const": "matrices"},
                        "ts": {"type": "number", "exclusiveMinimum": 0},
                        "a": _MAT,
                        "b": _MAT,
                        "sigma_w": _MAT,
                    },
                },
            ]
        },
        "channel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mu_db", "sigma_db"],
            "properties": {
                "mu_db": _NUM,
                "sigma_db": {"type": "number", "exclusiveMinimum": 0},
                "frame_bits": {"type": "integer", "minimum": 0},
                "slot_period_s": {"type": "number", "exclusiveMinimum": 0},
                "abstraction": {"enum": ["gilbert", "fsmc", "bernoulli"]},
                "threshold_db": _NUM,
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "burst_rule": {"enum": ["tail", "mean"]},
                "thresholds_db": _VEC,
                "corr": {"type": "number", "minimum": -1, "maximum": 1},
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "required": ["q", "r"],
            "properties": {"q": _MAT, "r": _MAT},
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "n_runs": {"type": "integer", "minimum": 1},
                "initial_state": _VEC,
                "initial_mode": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "noise_on": {"type": "boolean"},
            },
        },
        "reference": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "value": _NUM,
                    "abs_tol": {"type": "number", "minimum": 0},
                    "rel_tol": {"type": "number", "minimum": 0},
                    "expect": {"enum": ["stable", "unstable"]},
                },
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}


class ConfigError(DomainError):
    """Configuration file missing, unparsable or rejected by the schema."""


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    raw: dict
    plant: DiscretePlant
    analytic: chn.AnalyticChannel
    weights: LqWeights
    sim: SimConfig

    @property
    def channel_cfg(self) -> dict:
        return self.raw["channel"]

    @property
    def reference(self) -> dict:
        return self.raw.get("reference", {})

    @property
    def epsilon(self) -> float:
        return float(self.channel_cfg.get("epsilon", 3.17e-10))

    def threshold_db(self) -> float:
        """Configured Gilbert threshold, or the PER threshold of ``epsilon`` when absent."""
        c = self.channel_cfg
        if "threshold_db" in c:
            return float(c["threshold_db"])
        return chn.per_threshold_for(self.epsilon, self.analytic.frame_bits)

    def markov_channel(self) -> chn.MarkovChannel:
        c = self.channel_cfg
        kind = c.get("abstraction", "gilbert")
        if kind == "gilbert":
            return chn.build_gilbert(self.analytic, chn.GilbertSpec(self.threshold_db(), self.epsilon),
                                     c.get("burst_rule", "tail"))
        if kind == "fsmc":
            if "thresholds_db" not in c:
                raise ConfigError("fsmc abstraction needs channel.thresholds_db")
            return chn.build_fsmc(self.analytic, c["thresholds_db"], c.get("corr", 0.0))
        return chn.bernoulli_channel(1.0 - chn.expected_per(self.analytic)[0])

    def model(self) -> MjlsModel:
        return MjlsModel(self.plant, self.markov_channel())


def fixture_dir() -> Path:
    env = os.environ.get(FIXTURE_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("wncs") / "fixtures"))


def fixture_names() -> dict[str, Path]:
    """Fixture name and alias -> file."""
    out = {}
    for path in sorted(fixture_dir().glob("*.yaml")):
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError:
            continue
        if not isinstance(doc, dict):
            continue
        out[doc.get("name", path.stem)] = path
        for alias in doc.get("aliases", []):
            out[alias] = path
    return out


def _plant_from(d: dict) -> DiscretePlant:
    ts = float(d.get("ts", 0.01))
    if d["model"] == "pendulum":
        sw = None
        if "sigma_w" in d:
            sw = np.array(d["sigma_w"], dtype=float)
        elif "noise_std" in d:
            v = np.array(d["noise_std"], dtype=float)
            sw = np.outer(v, v)
        return pendulum_plant(PendulumParams(**d.get("params", {})), ts, sw)
    return DiscretePlant(np.array(d["a"], dtype=float), np.array(d["b"], dtype=float), ts,
                         np.array(d["sigma_w"], dtype=float))


def parse_config(doc) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    c = doc["channel"]
    analytic = chn.AnalyticChannel(c["mu_db"], c["sigma_db"], c.get("frame_bits", 208),
                                   c.get("slot_period_s", 0.01))
    plant = _plant_from(doc["plant"])
    weights = LqWeights(np.array(doc["weights"]["q"], dtype=float),
                        np.array(doc["weights"]["r"], dtype=float))
    s = doc.get("sim", {})
    sim = SimConfig(
        horizon=s.get("horizon", 1200), n_runs=s.get("n_runs", 10_000),
        initial_state=tuple(s.get("initial_state", (0.0, 0.0, np.pi / 10.0, 0.0))),
        initial_mode=s.get("initial_mode", 0), seed=s.get("seed", 0),
        noise_on=s.get("noise_on", True))
    return ExperimentConfig(doc["name"], doc, plant, analytic, weights, sim)


def load_config(source: str | os.PathLike) -> ExperimentConfig:
    """Load a config from a YAML path, or from a fixture name or alias."""
    path = Path(source)
    if not path.is_file():
        names = fixture_names()
        if str(source) not in names:
            raise ConfigError(f"no config file or fixture named {source!r}; "
                              f"available fixtures: {', '.join(sorted(names))}")
        path = names[str(source)]
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(doc)
