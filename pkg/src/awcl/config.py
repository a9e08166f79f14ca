"""Run configuration: one YAML document with nested sections.

.. code-block:: yaml

    seed: 0
    output_dir: runs/demo
    synthetic: {n_scans: 20, frames_per_scan: 200}
    model: {backbone: small-cnn, feature_dim: 64}
    sampler: {mode: awcl, granularity: fine, anatomy_ratio: 1.0}
    train: {epochs: 10, lr: 0.001}
    eval: {epochs: 200}

Sections a file omits take their defaults; a section without ``seed``
inherits the top-level one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .evaluation import EvalConfig
from .model import EncoderSpec
from .sampler import SamplerConfig
from .train import TrainConfig

SECTIONS = ("synthetic", "model", "sampler", "train", "eval")


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{section} must be a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) in {section}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section + ".") else f"{section}: {msg}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: EncoderSpec = field(default_factory=EncoderSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        unknown = sorted(set(d) - set(SECTIONS) - {"seed", "output_dir"})
        if unknown:
            raise ConfigError(f"unknown top-level field(s): {', '.join(unknown)}")
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        sections = {}
        for name in SECTIONS:
            values = d.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"{name} must be a mapping")
            values = dict(values)
            if name in ("synthetic", "sampler", "train", "eval"):
                values.setdefault("seed", seed)
            sections[name] = values
        cfg = cls(seed=seed, output_dir=d.get("output_dir"),
                  synthetic=_build(SyntheticSpec, "synthetic", sections["synthetic"]),
                  model=_build(EncoderSpec, "model", sections["model"]),
                  sampler=_build(SamplerConfig, "sampler", sections["sampler"]),
                  train=sections["train"], eval=sections["eval"])
        cfg.train_config()  # validate eagerly
        cfg.eval_config("2", "full")
        return cfg

    def train_config(self) -> TrainConfig:
        values = dict(self.train)
        for key in ("sampler", "model"):
            if key in values:
                raise ConfigError(f"train.{key} belongs in the top-level '{key}' section")
        if "batch_size" not in values:
            values["batch_size"] = self.sampler.batch_size
        values["sampler"] = dataclasses.replace(self.sampler)
        values["model"] = dataclasses.replace(self.model)
        return _build(TrainConfig, "train", values)

    def eval_config(self, task, protocol) -> EvalConfig:
        values = dict(self.eval)
        for key in ("task", "protocol"):
            values.pop(key, None)
        names = {f.name for f in dataclasses.fields(EvalConfig)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown field(s) in eval: {', '.join(unknown)}")
        try:
            return EvalConfig.for_task(task, protocol, **values)
        except ConfigError as exc:
            raise ConfigError(str(exc)) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"eval: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "synthetic": {**dataclasses.asdict(self.synthetic), "image_size": list(self.synthetic.image_size)},
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "train": dict(self.train),
            "eval": dict(self.eval),
        }


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc.__class__.__name__})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_yaml(data: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
