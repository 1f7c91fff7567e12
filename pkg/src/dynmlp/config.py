"""Run configuration: one JSON document with dataset / encoder / metadata_backbone /
fusion / training sections plus output_dir and seed."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbones import ImageEncoderConfig, MetadataBackboneConfig
from .datasets import SyntheticSpec
from .errors import ConfigError
from .fusion import FusionConfig
from .training import TrainConfig


@dataclass
class DatasetConfig:
    synthetic: SyntheticSpec | None = None
    path: str | None = None  # directory with train.jsonl / val.jsonl
    train_path: str | None = None
    val_path: str | None = None

    def validate(self) -> None:
        sources = [self.synthetic is not None, self.path is not None, self.train_path is not None]
        if sum(sources) != 1:
            raise ConfigError("dataset", "give exactly one of synthetic, path, train_path")
        if self.train_path is not None and self.val_path is None:
            raise ConfigError("dataset.val_path", "required alongside train_path")
        if self.synthetic is not None:
            self.synthetic.validate()


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synthetic=SyntheticSpec()))
    encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    metadata_backbone: MetadataBackboneConfig = field(default_factory=MetadataBackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        self.dataset.validate()
        self.encoder.validate()
        self.metadata_backbone.validate()
        self.fusion.validate()
        self.training.validate()
        if self.fusion.strategy == "dynamic" and self.fusion.d > self.encoder.output_dim:
            raise ConfigError("fusion.d", f"d={self.fusion.d} exceeds encoder.output_dim={self.encoder.output_dim}")
        if self.dataset.synthetic is not None:
            spec = self.dataset.synthetic
            if spec.num_classes != self.fusion.num_classes:
                raise ConfigError("fusion.num_classes",
                                  f"{self.fusion.num_classes} but the synthetic dataset has {spec.num_classes} classes")
            if spec.feature_dim != self.encoder.input_dim:
                raise ConfigError("encoder.input_dim",
                                  f"{self.encoder.input_dim} but synthetic features have {spec.feature_dim} dims")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "encoder": ImageEncoderConfig,
    "metadata_backbone": MetadataBackboneConfig,
    "fusion": FusionConfig,
    "training": TrainConfig,
}


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(where, "must be an object")
    names = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", "unknown key")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = {"dataset", "output_dir", "seed", *_SECTIONS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build(cls, doc[name], name)
    if "dataset" in doc:
        ds = doc["dataset"]
        if not isinstance(ds, dict):
            raise ConfigError("dataset", "must be an object")
        ds = dict(ds)
        if ds.get("synthetic") is not None:
            ds["synthetic"] = _build(SyntheticSpec, ds["synthetic"], "dataset.synthetic")
        kwargs["dataset"] = _build(DatasetConfig, ds, "dataset")
    for key in ("output_dir", "seed"):
        if key in doc:
            kwargs[key] = doc[key]
    cfg = RunConfig(**kwargs)
    if "training" not in doc or "seed" not in doc["training"]:
        cfg.training.seed = cfg.seed
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON, falling back to strings."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot descend into a non-object")
        node[keys[-1]] = _parse_value(raw)
    return doc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    cfg = config_from_dict(apply_overrides(doc, overrides or []))
    cfg.validate()
    return cfg
