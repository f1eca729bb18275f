"""Run configuration for the command line.

A run is described by one YAML document mirroring :class:`RunConfig`::

    seed: 7                 # master seed; drives simulation, GP and training
    preset: quick           # "default" or "quick" pipeline settings
    simulate:               # SimConfig fields
      n_patients: 415
      signal_strength: strong
    pipeline:               # PipelineConfig fields (nested sections allowed)
      target: w72
      model: multimodal
      gp: {restarts: 1}
      train_config: {epochs: 10}
    cohort_format: csv-pair

Values resolve as built-in defaults < preset < config file < command-line
flags. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .experiment import PipelineConfig, _jsonable, fingerprint, from_dict, quick_config
from .synth import SimConfig

PRESETS = ("default", "quick")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    preset: str = "default"
    simulate: SimConfig = field(default_factory=SimConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    cohort_format: str = "csv-pair"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.cohort_format not in ("csv-pair", "json"):
            raise ConfigError("cohort_format must be csv-pair or json")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def to_json(self):
        return _jsonable(asdict(self))

    def fingerprint(self):
        return fingerprint(self.to_json())

    def sim_config(self):
        return replace(self.simulate, seed=self.seed)

    def pipeline_config(self):
        return replace(self.pipeline, seed=self.seed)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_json(), sort_keys=True))
        return path


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _base(preset):
    pipeline = quick_config() if preset == "quick" else PipelineConfig()
    return RunConfig(preset=preset, pipeline=pipeline).to_json()


def load_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve(file_doc=None, overrides=None):
    """Build a :class:`RunConfig` from an optional file document and flag
    overrides (both nested dicts)."""
    layers = [file_doc or {}, overrides or {}]
    preset = "default"
    for layer in layers:
        preset = layer.get("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}")
    doc = _base(preset)
    for layer in layers:
        doc = _merge(doc, layer)
    try:
        return from_dict(RunConfig, doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
