"""Feature extractors for both paths and the channel adapters around the fusion.

The image path works on precomputed feature vectors: ``identity`` passes them
through, ``mlp`` applies a small ReLU network. The metadata path is a residual
MLP over the 6-d cyclic encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoding import ENCODED_DIM
from .errors import ConfigError
from .nn import Dropout, Linear, Module


@dataclass
class ImageEncoderConfig:
    mode: str = "mlp"
    input_dim: int = 16
    output_dim: int = 256
    hidden: list[int] = field(default_factory=lambda: [256])

    def validate(self) -> None:
        if self.mode not in ("identity", "mlp"):
            raise ConfigError("encoder.mode", f"must be 'identity' or 'mlp', got {self.mode!r}")
        for key in ("input_dim", "output_dim"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"encoder.{key}", "must be a positive integer")
        if self.mode == "identity" and self.input_dim != self.output_dim:
            raise ConfigError("encoder.output_dim", f"identity mode needs output_dim == input_dim ({self.input_dim})")
        if any(int(w) < 1 for w in self.hidden):
            raise ConfigError("encoder.hidden", "widths must be positive")


@dataclass
class MetadataBackboneConfig:
    embed_dim: int = 256
    residual_blocks: int = 4
    dropout_rate: float = 0.0

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("metadata_backbone.embed_dim", "must be >= 1")
        if self.residual_blocks < 0:
            raise ConfigError("metadata_backbone.residual_blocks", "must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("metadata_backbone.dropout_rate", "must be in [0, 1)")


class ImageEncoder(Module):
    def __init__(self, cfg: ImageEncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.layers: list[Linear] = []
        if cfg.mode == "mlp":
            widths = [cfg.input_dim, *cfg.hidden, cfg.output_dim]
            self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, raw: Tensor) -> Tensor:
        if raw.shape[-1] != self.cfg.input_dim:
            raise ag.ShapeError(f"image encoder: expected input dim {self.cfg.input_dim}, got {raw.shape[-1]}")
        x = raw
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
        return x


class ResidualBlock(Module):
    """u + relu(W2 relu(W1 u))."""

    def __init__(self, dim: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.dropout = Dropout(dropout_rate, rng)

    def forward(self, u: Tensor) -> Tensor:
        inner = self.dropout(ag.relu(self.fc1(u)))
        return u + ag.relu(self.fc2(inner))


class MetadataBackbone(Module):
    def __init__(self, cfg: MetadataBackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.input = Linear(ENCODED_DIM, cfg.embed_dim, rng)
        self.blocks = [ResidualBlock(cfg.embed_dim, rng, cfg.dropout_rate) for _ in range(cfg.residual_blocks)]

    def forward(self, x_e: Tensor) -> Tensor:
        if x_e.shape[-1] != ENCODED_DIM:
            raise ag.ShapeError(f"metadata backbone: expected {ENCODED_DIM}-d encoding, got shape {x_e.shape}")
        u = ag.relu(self.input(x_e))
        for block in self.blocks:
            u = block(u)
        return u


class ChannelAdapters(Module):
    """Linear reduction d_i -> d before the dynamic blocks, increase d -> d_i after."""

    def __init__(self, image_dim: int, reduced_dim: int, rng: np.random.Generator):
        if reduced_dim > image_dim:
            raise ConfigError("fusion.d", f"d={reduced_dim} exceeds image feature dim {image_dim}")
        self.reduction = Linear(image_dim, reduced_dim, rng)
        self.increase = Linear(reduced_dim, image_dim, rng)

    def reduce(self, z_i: Tensor) -> Tensor:
        return self.reduction(z_i)

    def expand(self, z: Tensor) -> Tensor:
        return self.increase(z)
