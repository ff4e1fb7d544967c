"""Experiment configuration and deterministic JSON output."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from umark.embed import EmbedConfig
from umark.segnet import IMAGE_SIZE
from umark.synthdata import ConfigError, DatasetConfig
from umark.triggers import TriggerSpec
from umark.verify import VerifyConfig, cells_touching


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    s = format(x, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits; keys keep insertion order."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def sha256_json(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


@dataclass(frozen=True)
class AblationScale:
    """Reduced training scale used for the retrain-per-point sweeps."""

    train_count: int = 200
    epochs: int = 10
    probes: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    ablation: AblationScale = field(default_factory=AblationScale)
    grid_path: str | None = None
    grid_size: int = 8
    detector_recipe: str = "hist16-linear"
    out_dir: str = "out"
    master_seed: int = 20240611

    def __post_init__(self):
        size = self.dataset.image_size
        if size != IMAGE_SIZE:
            raise ConfigError(f"the network takes {IMAGE_SIZE}x{IMAGE_SIZE} images, got {size}")
        if size % self.grid_size:
            raise ConfigError(f"grid size {self.grid_size} does not divide image size {size}")
        try:
            self.trigger.check_fits(size, size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cells_touching(self.trigger.footprint(size, size), self.grid_size).all():
            raise ConfigError("the trigger covers every grid cell")
        if self.verify.probe_count < 1:
            raise ConfigError("probe count must be >= 1")
        if self.verify.M < 0:
            raise ConfigError("M must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("dataset", "trigger", "embed"):
            d[k] = d[k].to_dict()
        d["verify"] = asdict(self.verify)
        d["ablation"] = asdict(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "dataset" in d:
                d["dataset"] = DatasetConfig.from_dict(d["dataset"])
            if "trigger" in d:
                d["trigger"] = TriggerSpec.from_dict(d["trigger"])
            if "embed" in d:
                d["embed"] = EmbedConfig.from_dict(d["embed"])
            if "verify" in d:
                d["verify"] = VerifyConfig(**d["verify"])
            if "ablation" in d:
                d["ablation"] = AblationScale(**d["ablation"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def sha256(self) -> str:
        # where results are written does not change them
        d = self.to_dict()
        d.pop("out_dir", None)
        return sha256_json(d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)
