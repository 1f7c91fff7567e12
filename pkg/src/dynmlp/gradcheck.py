"""Full-model finite-difference gradient checks on tiny configurations."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbones import ImageEncoderConfig, MetadataBackboneConfig
from .encoding import MetadataRecord, encode_batch
from .fusion import FusionConfig, FusionModel
from .training import smoothed_cross_entropy

MAX_GRADCHECK_D = 16

ALL_CONFIGS = ("image_only", "concat", "addition", "multiplication", "dynamic-A", "dynamic-B", "dynamic-C")

TINY_ENCODER = ImageEncoderConfig(mode="mlp", input_dim=8, output_dim=12, hidden=[8])
TINY_BACKBONE = MetadataBackboneConfig(embed_dim=8, residual_blocks=1)
TINY_FUSION = FusionConfig(strategy="dynamic", variant="C", d=8, h=4, N=2, num_classes=5)


def random_batch(input_dim: int, num_classes: int, batch: int, rng: np.random.Generator):
    features = rng.normal(size=(batch, input_dim))
    records = [MetadataRecord(float(rng.uniform(-80, 80)), float(rng.uniform(-170, 170)), float(rng.uniform(0, 0.99)))
               for _ in range(batch)]
    encoded, _ = encode_batch(records)
    labels = rng.integers(0, num_classes, size=batch)
    return features, encoded, labels


def model_gradcheck(encoder_cfg: ImageEncoderConfig, backbone_cfg: MetadataBackboneConfig,
                    fusion_cfg: FusionConfig, batch: int = 3, seed: int = 0, step: float = 1e-5,
                    label_smoothing: float = 0.1) -> float:
    """Max relative error between backprop and central differences over every parameter."""
    if fusion_cfg.strategy == "dynamic" and fusion_cfg.d > MAX_GRADCHECK_D:
        raise ValueError(f"fusion.d={fusion_cfg.d} too large for a gradient check (max {MAX_GRADCHECK_D})")
    prev = ag.get_default_dtype()
    ag.set_default_dtype(np.float64)
    try:
        model = FusionModel(encoder_cfg, backbone_cfg, fusion_cfg, seed=seed)
        rng = np.random.default_rng([seed, 3])
        # randomize the zero-initialized biases/affines so every parameter sees a generic point
        for p in model.parameters():
            p.data = p.data + rng.uniform(-0.1, 0.1, size=p.shape)
        features, encoded, labels = random_batch(encoder_cfg.input_dim, fusion_cfg.num_classes, batch, rng)
        X, E = Tensor(features), Tensor(encoded)

        def loss():
            return smoothed_cross_entropy(model(X, E), labels, label_smoothing, fusion_cfg.num_classes)

        return ag.check_gradients(loss, model.parameters(), step)
    finally:
        ag.set_default_dtype(prev)


def config_for(label: str, base: FusionConfig = TINY_FUSION) -> FusionConfig:
    from .analysis import parse_strategy

    return parse_strategy(label, dataclasses.replace(base, pad_width=0))
