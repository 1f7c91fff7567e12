"""Synthetic confusable-genus benchmark and JSONL dataset I/O.

Classes come in genera. Classes of one genus share a feature distribution up
to a small offset (``visual_ambiguity``) but live in disjoint geographic
regions and peak at different times of year, so only metadata separates them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoding import MetadataRecord, date_to_year_fraction, encode_batch
from .errors import ConfigError

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"


@dataclass
class LabeledExample:
    features: np.ndarray
    metadata: MetadataRecord
    label: int


@dataclass
class ExampleArrays:
    features: np.ndarray  # (n, input_dim)
    encoded: np.ndarray  # (n, 6)
    missing: np.ndarray  # (n,) bool
    labels: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "ExampleArrays":
        return ExampleArrays(self.features[idx], self.encoded[idx], self.missing[idx], self.labels[idx])


def as_arrays(examples: Sequence[LabeledExample]) -> ExampleArrays:
    encoded, missing = encode_batch(e.metadata for e in examples)
    dim = len(examples[0].features) if examples else 0
    features = np.array([e.features for e in examples], dtype=np.float64).reshape(len(examples), dim)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return ExampleArrays(features, encoded, missing, labels)


@dataclass
class DatasetSplit:
    train: list[LabeledExample]
    val: list[LabeledExample]
    num_classes: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.train or not self.val:
            raise ValueError("both train and validation splits must be nonempty")
        for name, examples in (("train", self.train), ("val", self.val)):
            bad = [e.label for e in examples if not 0 <= e.label < self.num_classes]
            if bad:
                raise ValueError(f"{name} split has label {bad[0]} outside [0, {self.num_classes})")
        absent = sorted(set(range(self.num_classes)) - {e.label for e in self.train})
        if absent:
            raise ValueError(f"classes {absent} have no training examples")

    @property
    def feature_dim(self) -> int:
        return len(self.train[0].features)

    def arrays(self, which: str) -> ExampleArrays:
        if which not in self._cache:
            self._cache[which] = as_arrays(getattr(self, which))
        return self._cache[which]

    def fingerprint(self, which: str) -> str:
        """sha256 of the split's JSONL serialization."""
        text = "".join(_example_line(e) + "\n" for e in getattr(self, which))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class SyntheticSpec:
    genera: int = 4
    classes_per_genus: int = 2
    feature_dim: int = 16
    visual_ambiguity: float = 0.1
    genus_separation: float = 5.0
    geo_spread: float = 5.0  # degrees
    min_center_separation: float | None = None  # degrees; default 6 * geo_spread
    date_concentration: float = 10.0
    samples_per_class: int = 300
    val_samples_per_class: int = 100
    missing_metadata_rate: float = 0.0
    feature_noise: float = 1.0
    seed: int = 17

    @property
    def num_classes(self) -> int:
        return self.genera * self.classes_per_genus

    def validate(self) -> None:
        positive = ("genera", "classes_per_genus", "feature_dim", "samples_per_class",
                    "val_samples_per_class", "date_concentration", "feature_noise")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"dataset.synthetic.{key}", "must be positive")
        for key in ("visual_ambiguity", "genus_separation", "geo_spread"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"dataset.synthetic.{key}", "must be non-negative")
        if not 0 <= self.missing_metadata_rate <= 1:
            raise ConfigError("dataset.synthetic.missing_metadata_rate", "must be in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("dataset.synthetic.genera", "need at least 2 classes in total")

    @property
    def center_separation(self) -> float:
        if self.min_center_separation is not None:
            return self.min_center_separation
        return 6.0 * self.geo_spread


def _place_centers(rng: np.random.Generator, count: int, min_sep: float) -> np.ndarray:
    centers: list[np.ndarray] = []
    for _ in range(100_000):
        cand = np.array([rng.uniform(-60.0, 60.0), rng.uniform(-170.0, 170.0)])
        if all(np.hypot(*(cand - c)) >= min_sep for c in centers):
            centers.append(cand)
            if len(centers) == count:
                return np.array(centers)
    raise ConfigError("dataset.synthetic.min_center_separation",
                      f"cannot place {count} centers {min_sep} degrees apart")


def generate_synthetic(spec: SyntheticSpec) -> DatasetSplit:
    spec.validate()
    G, P, D, C = spec.genera, spec.classes_per_genus, spec.feature_dim, spec.num_classes
    layout = np.random.default_rng([spec.seed, 0])
    genus_means = layout.normal(size=(G, D)) * spec.genus_separation
    offsets = layout.normal(size=(C, D))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    centers = _place_centers(layout, C, spec.center_separation)
    peaks = layout.uniform(0.0, 1.0, size=C)
    date_sd = 1.0 / (2 * math.pi * math.sqrt(spec.date_concentration))

    train, val = [], []
    n_train, n_val = spec.samples_per_class, spec.val_samples_per_class
    for c in range(C):
        rng = np.random.default_rng([spec.seed, 1, c])
        n = n_train + n_val
        mean = genus_means[c // P] + spec.visual_ambiguity * offsets[c]
        feats = mean + spec.feature_noise * rng.normal(size=(n, D))
        lat = np.clip(centers[c, 0] + spec.geo_spread * rng.normal(size=n), -90.0, 90.0)
        lon = np.clip(centers[c, 1] + spec.geo_spread * rng.normal(size=n), -180.0, 180.0)
        date = np.mod(peaks[c] + date_sd * rng.normal(size=n), 1.0)
        date[date >= 1.0] = 0.0
        dropped = rng.random(n) < spec.missing_metadata_rate
        for j in range(n):
            meta = MetadataRecord() if dropped[j] else MetadataRecord(float(lat[j]), float(lon[j]), float(date[j]))
            (train if j < n_train else val).append(LabeledExample(feats[j], meta, c))
    return DatasetSplit(train, val, C)


def _example_line(example: LabeledExample) -> str:
    m = example.metadata
    return json.dumps({
        "features": [float(v) for v in example.features],
        "lat": m.lat, "lon": m.lon, "date": m.date,
        "label": int(example.label),
    })


def save_examples(examples: Sequence[LabeledExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(_example_line(e) + "\n")


def save_dataset(split: DatasetSplit, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_examples(split.train, out_dir / TRAIN_FILE)
    save_examples(split.val, out_dir / VAL_FILE)


def _parse_optional(doc: dict, key: str) -> float | None:
    value = doc.get(key)
    if value is None:
        return None
    if key == "date" and isinstance(value, str):
        return date_to_year_fraction(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{key} must be a number or null, got {value!r}")
    return float(value)


def parse_example(line: str) -> LabeledExample:
    doc = json.loads(line)
    if not isinstance(doc, dict):
        raise ValueError("expected a JSON object")
    missing = [k for k in ("features", "label") if k not in doc]
    if missing:
        raise ValueError(f"missing keys {missing}")
    features = np.asarray(doc["features"], dtype=np.float64)
    if features.ndim != 1 or not np.all(np.isfinite(features)):
        raise ValueError("features must be a flat list of finite numbers")
    label = doc["label"]
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise ValueError(f"label must be a non-negative integer, got {label!r}")
    record = MetadataRecord(*(_parse_optional(doc, k) for k in ("lat", "lon", "date")))
    record.validate()
    return LabeledExample(features, record, label)


def load_examples(path: str | Path) -> list[LabeledExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                examples.append(parse_example(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    dims = {len(e.features) for e in examples}
    if len(dims) > 1:
        raise ValueError(f"{path}: inconsistent feature lengths {sorted(dims)}")
    return examples


def load_dataset(path: str | Path, val_path: str | Path | None = None,
                 num_classes: int | None = None) -> DatasetSplit:
    """Load a directory holding train.jsonl/val.jsonl, or an explicit train/val file pair."""
    path = Path(path)
    if path.is_dir():
        train_path, val_path = path / TRAIN_FILE, path / VAL_FILE
        manifest = path / "manifest.json"
        if num_classes is None and manifest.exists():
            num_classes = json.loads(manifest.read_text()).get("num_classes")
    else:
        if val_path is None:
            raise ValueError("a validation file is required when path is a single file")
        train_path = path
    train, val = load_examples(train_path), load_examples(val_path)
    if train and val and len(train[0].features) != len(val[0].features):
        raise ValueError(f"train/val feature lengths differ: {len(train[0].features)} vs {len(val[0].features)}")
    if num_classes is None:
        num_classes = 1 + max(e.label for e in train + val)
    return DatasetSplit(train, val, int(num_classes))


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None, epoch: int = 0) -> list[np.ndarray]:
    """Per-epoch permutation from (seed, epoch); the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(data: ExampleArrays, batch_size: int, shuffle_seed: int | None,
                   epoch: int = 0) -> Iterator[ExampleArrays]:
    for idx in batch_indices(len(data), batch_size, shuffle_seed, epoch):
        yield data.take(idx)
