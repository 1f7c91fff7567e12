"""Analyses over trained models: classifier-weight distances, embedding tables,
per-class accuracy and the multi-strategy comparison harness."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbones import ImageEncoderConfig, MetadataBackboneConfig
from .datasets import DatasetSplit, ExampleArrays
from .fusion import FusionConfig, FusionModel
from .training import TrainConfig, evaluate, model_scores, train_loop

log = logging.getLogger(__name__)


@dataclass
class DistanceMatrix:
    class_ids: list[int]
    values: np.ndarray


def classifier_weight_distances(weight: np.ndarray, class_subset: Sequence[int] | None = None) -> DistanceMatrix:
    """Pairwise L2 distances between class rows of a (num_classes, dim) head weight."""
    weight = np.asarray(weight, dtype=np.float64)
    ids = list(range(weight.shape[0])) if class_subset is None else [int(c) for c in class_subset]
    if not ids:
        raise ValueError("class subset is empty")
    bad = [c for c in ids if not 0 <= c < weight.shape[0]]
    if bad:
        raise ValueError(f"class ids {bad} outside [0, {weight.shape[0]})")
    rows = weight[ids]
    diff = rows[:, None, :] - rows[None, :, :]
    return DistanceMatrix(ids, np.sqrt((diff * diff).sum(axis=-1)))


def write_distance_csv(dm: DistanceMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", *dm.class_ids])
        for cid, row in zip(dm.class_ids, dm.values):
            w.writerow([cid, *(repr(float(v)) for v in row)])


def read_distance_csv(path: str | Path) -> DistanceMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [int(c) for c in rows[0][1:]]
    return DistanceMatrix(ids, np.array([[float(v) for v in r[1:]] for r in rows[1:]]))


@dataclass
class EmbeddingTable:
    labels: np.ndarray
    missing: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def export_embeddings(model: FusionModel, data: ExampleArrays, tap_point: str = "post_fusion",
                      batch_size: int = 512) -> EmbeddingTable:
    model.eval()
    parts = [
        model.embeddings(data.features[i:i + batch_size], data.encoded[i:i + batch_size], tap_point)
        for i in range(0, len(data), batch_size)
    ]
    values = np.concatenate(parts) if parts else np.zeros((0, 0))
    return EmbeddingTable(data.labels.copy(), data.missing.copy(), values)


def write_embedding_csv(table: EmbeddingTable, path: str | Path) -> None:
    dim = table.values.shape[1] if table.values.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "missing_flag", *(f"e{i}" for i in range(dim))])
        for label, miss, row in zip(table.labels, table.missing, table.values):
            w.writerow([int(label), int(bool(miss)), *(repr(float(v)) for v in row)])


def per_class_accuracy(scores: np.ndarray, labels: np.ndarray, num_classes: int) -> list[dict]:
    """Top-1 per class; classes with no examples get accuracy None (undefined)."""
    pred = np.argmax(scores, axis=1)  # argmax takes the lowest index on ties
    out = []
    for c in range(num_classes):
        mask = labels == c
        total = int(mask.sum())
        correct = int((pred[mask] == c).sum())
        out.append({"class": c, "correct": correct, "total": total,
                    "top1": correct / total if total else None})
    return out


def model_per_class_accuracy(model: FusionModel, data: ExampleArrays) -> list[dict]:
    return per_class_accuracy(model_scores(model, data), data.labels, model.fusion_cfg.num_classes)


def write_per_class_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "correct", "total", "top1"])
        for r in rows:
            w.writerow([r["class"], r["correct"], r["total"], "" if r["top1"] is None else repr(r["top1"])])


def parse_strategy(label: str, base: FusionConfig) -> FusionConfig:
    """'concat', 'dynamic', 'dynamic-B', 'dynamic-C', 'dynamic-C-ip', 'dynamic-C-mp' -> FusionConfig."""
    parts = label.split("-")
    fields = {k: v for k, v in dataclasses.asdict(base).items()}
    fields["strategy"] = parts[0]
    fields["pad_width"] = 0
    if parts[0] == "dynamic":
        variant = parts[1] if len(parts) > 1 else base.variant
        fields["variant"] = variant
        if variant == "C":
            which = parts[2] if len(parts) > 2 else "both"
            if which not in ("ip", "mp", "both"):
                raise ValueError(f"unknown variant-C input mode {which!r} in {label!r}")
            fields["ip_concat"] = which in ("ip", "both")
            fields["mp_concat"] = which in ("mp", "both")
        else:
            fields["ip_concat"] = fields["mp_concat"] = False
    elif len(parts) > 1:
        raise ValueError(f"strategy {parts[0]!r} takes no variant suffix: {label!r}")
    cfg = FusionConfig(**fields)
    cfg.validate()
    return cfg


def count_parameters(encoder_cfg, backbone_cfg, fusion_cfg: FusionConfig) -> int:
    return FusionModel(encoder_cfg, backbone_cfg, fusion_cfg, seed=0).num_parameters()


def equalizing_pad_width(encoder_cfg: ImageEncoderConfig, backbone_cfg: MetadataBackboneConfig,
                         fusion_cfg: FusionConfig, target: int) -> int:
    """Hidden width of the residual image-path MLP that brings a baseline closest to ``target`` params."""
    base = count_parameters(encoder_cfg, backbone_cfg, dataclasses.replace(fusion_cfg, pad_width=0))
    d_i = encoder_cfg.output_dim
    deficit = target - base - d_i
    if deficit <= 0:
        return 0
    return max(0, int(round(deficit / (2 * d_i + 1))))


def compare_strategies(split: DatasetSplit, encoder_cfg: ImageEncoderConfig, backbone_cfg: MetadataBackboneConfig,
                       base_fusion: FusionConfig, train_cfg: TrainConfig, strategies: Sequence[str],
                       seed: int = 0, equalize_params: bool = False) -> dict:
    """Train every strategy on the same split with the same budget and seed."""
    configs: list[tuple[str, FusionConfig | None, str | None]] = []
    for label in strategies:
        try:
            configs.append((label, parse_strategy(label, base_fusion), None))
        except ValueError as exc:
            configs.append((label, None, str(exc)))

    target = None
    if equalize_params:
        dyn = next((c for _, c, _ in configs if c is not None and c.strategy == "dynamic"), None)
        if dyn is None:
            dyn = parse_strategy("dynamic", dataclasses.replace(base_fusion, strategy="dynamic"))
        target = count_parameters(encoder_cfg, backbone_cfg, dyn)
        for i, (label, cfg, err) in enumerate(configs):
            if cfg is not None and cfg.strategy != "dynamic":
                width = equalizing_pad_width(encoder_cfg, backbone_cfg, cfg, target)
                configs[i] = (label, dataclasses.replace(cfg, pad_width=width), err)

    entries = []
    for label, cfg, err in configs:
        entry: dict = {"strategy": label}
        if cfg is None:
            entries.append({**entry, "status": "failed", "error": err})
            continue
        try:
            model = FusionModel(encoder_cfg, backbone_cfg, cfg, seed=seed)
            result = train_loop(model, split, train_cfg)
            metrics = evaluate(model, split.arrays("val"))
            entry.update(status="ok", params=model.num_parameters(), pad_width=cfg.pad_width,
                         top1=metrics.top1, top5=metrics.top5, mean_loss=metrics.mean_loss,
                         history=result.history, fusion=dataclasses.asdict(cfg))
        except Exception as exc:  # one failed run must not sink the report
            log.warning("strategy %s failed: %s", label, exc)
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        entries.append(entry)

    return {
        "seed": seed,
        "split_hashes": {"train": split.fingerprint("train"), "val": split.fingerprint("val")},
        "train_config": dataclasses.asdict(train_cfg),
        "equalize_params": equalize_params,
        "target_params": target,
        "entries": entries,
    }
