"""Image/metadata fusion strategies, centred on the dynamic MLP.

The dynamic MLP projects the (channel-reduced) image feature through a stack
of N blocks whose weight matrices are generated per instance from a guide
feature derived from the metadata::

    W_n = reshape(f_n(guide), (in_n, out_n))
    z^{n} = relu(LN(z^{n-1} @ W_n))

Block widths follow a bottleneck d -> h -> ... -> h -> d. The refined feature
is expanded back to the image width and added onto the original image feature
before the classifier head.

Baselines: image_only, concat (head over [z_i, z_e]), addition (sum of two
heads' logits) and multiplication (renormalized product of two heads'
softmax outputs, carried as log-probabilities).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbones import (
    ChannelAdapters,
    ImageEncoder,
    ImageEncoderConfig,
    MetadataBackbone,
    MetadataBackboneConfig,
)
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, Stack

STRATEGIES = ("image_only", "concat", "addition", "multiplication", "dynamic")
VARIANTS = ("A", "B", "C")


@dataclass
class FusionConfig:
    strategy: str = "dynamic"
    variant: str = "C"
    d: int = 256
    h: int = 64
    N: int = 2
    ip_concat: bool | None = None  # None: on for variant C, off otherwise
    mp_concat: bool | None = None
    num_classes: int = 8
    share_generators: bool = False
    static_depth: int = 1  # variant B: static stacks per path per block
    ln_affine: bool = True
    pad_width: int = 0  # baselines: hidden width of a residual static MLP on the image path

    def __post_init__(self):
        if self.ip_concat is None:
            self.ip_concat = self.variant == "C"
        if self.mp_concat is None:
            self.mp_concat = self.variant == "C"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError("fusion.strategy", f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.num_classes < 2:
            raise ConfigError("fusion.num_classes", "must be >= 2")
        if self.pad_width < 0:
            raise ConfigError("fusion.pad_width", "must be >= 0")
        if self.strategy != "dynamic":
            return
        if self.N < 1:
            raise ConfigError("fusion.N", f"must be >= 1, got {self.N}")
        if self.d < 1:
            raise ConfigError("fusion.d", f"must be >= 1, got {self.d}")
        if not 1 <= self.h <= self.d:
            raise ConfigError("fusion.h", f"must satisfy 1 <= h <= d (h={self.h}, d={self.d})")
        if self.variant not in VARIANTS:
            raise ConfigError("fusion.variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "C" and not (self.ip_concat or self.mp_concat):
            raise ConfigError("fusion.ip_concat", "variant C needs ip_concat or mp_concat")
        if self.variant != "C" and (self.ip_concat or self.mp_concat):
            raise ConfigError("fusion.ip_concat", f"variant {self.variant} takes no concatenated inputs")
        if self.variant == "B" and self.static_depth < 1:
            raise ConfigError("fusion.static_depth", "must be >= 1")

    @property
    def label(self) -> str:
        if self.strategy != "dynamic":
            return self.strategy
        return f"dynamic-{self.variant}"


def block_schedule(d: int, h: int, N: int) -> list[tuple[int, int]]:
    """Per-block (in_dim, out_dim): d -> h, (h -> h) * (N - 2), h -> d; a single block is d -> d."""
    if N < 1 or not 1 <= h <= d:
        raise ConfigError("fusion.N" if N < 1 else "fusion.h", f"invalid schedule d={d}, h={h}, N={N}")
    if N == 1:
        return [(d, d)]
    return [(d, h)] + [(h, h)] * (N - 2) + [(h, d)]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (ag.reshape(x, (1, x.shape[0])), True) if x.ndim == 1 else (x, False)


def generate_dynamic_weights(guide: Tensor, generator: Linear, in_dim: int, out_dim: int) -> Tensor:
    """Flat generator output reshaped row-major to one (in_dim, out_dim) matrix per instance."""
    if generator.out_dim != in_dim * out_dim:
        raise ag.ShapeError(f"generator emits {generator.out_dim} values, block needs {in_dim}x{out_dim}")
    if guide.shape[-1] != generator.in_dim:
        raise ag.ShapeError(f"guide length {guide.shape[-1]} != generator input {generator.in_dim}")
    g, single = _batched(guide)
    flat = generator(g)
    W = ag.reshape(flat, (g.shape[0], in_dim, out_dim))
    return ag.reshape(W, (in_dim, out_dim)) if single else W


def dynamic_block_forward(z_in: Tensor, W: Tensor, norm: LayerNorm | None = None) -> Tensor:
    """relu(LN(z_in @ W)) with one weight matrix per instance."""
    z, single = _batched(z_in)
    if W.ndim == 2:
        W = ag.reshape(W, (1, *W.shape))
    if z.shape[-1] != W.shape[-2] or W.shape[0] != z.shape[0]:
        raise ag.ShapeError(f"dynamic block: input {z_in.shape} incompatible with weights {W.shape}")
    batch, in_dim, out_dim = W.shape
    proj = ag.reshape(ag.matmul(ag.reshape(z, (batch, 1, in_dim)), W), (batch, out_dim))
    normed = norm(proj) if norm is not None else ag.layer_norm(proj)
    out = ag.relu(normed)
    return ag.reshape(out, (out_dim,)) if single else out


class DynamicBlock(Module):
    def __init__(self, in_dim: int, out_dim: int, guide_dim: int, generator: Linear,
                 rng: np.random.Generator, static_depth: int = 0, ln_affine: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.generator = generator
        self.norm = LayerNorm(out_dim, affine=ln_affine)
        self.image_stacks = [Stack(in_dim, in_dim, rng, ln_affine) for _ in range(static_depth)]
        self.guide_stacks = [Stack(guide_dim, guide_dim, rng, ln_affine) for _ in range(static_depth)]

    def weights(self, guide: Tensor) -> Tensor:
        for stack in self.guide_stacks:
            guide = stack(guide)
        return generate_dynamic_weights(guide, self.generator, self.in_dim, self.out_dim)

    def forward(self, z: Tensor, guide: Tensor, trace: dict | None = None) -> Tensor:
        for stack in self.image_stacks:
            z = stack(z)
        W = self.weights(guide)
        if trace is not None:
            trace.setdefault("weights", []).append(W.data.copy())
        return dynamic_block_forward(z, W, self.norm)


class DynamicMLP(Module):
    def __init__(self, cfg: FusionConfig, guide_dim: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.guide_dim = guide_dim
        self.schedule = block_schedule(cfg.d, cfg.h, cfg.N)
        self.ip_embed = Linear(cfg.d + guide_dim, cfg.d, rng) if cfg.variant == "C" and cfg.ip_concat else None
        self.mp_embed = Linear(cfg.d + guide_dim, guide_dim, rng) if cfg.variant == "C" and cfg.mp_concat else None
        shared: dict[tuple[int, int], Linear] = {}
        depth = cfg.static_depth if cfg.variant == "B" else 0
        self.blocks = []
        for in_dim, out_dim in self.schedule:
            if cfg.share_generators and (in_dim, out_dim) in shared:
                gen = shared[(in_dim, out_dim)]
            else:
                gen = Linear(guide_dim, in_dim * out_dim, rng)
                shared[(in_dim, out_dim)] = gen
            self.blocks.append(DynamicBlock(in_dim, out_dim, guide_dim, gen, rng, depth, cfg.ln_affine))

    def forward(self, z_i0: Tensor, z_e: Tensor, trace: dict | None = None) -> Tensor:
        z, guide = z_i0, z_e
        if self.ip_embed is not None or self.mp_embed is not None:
            joint = ag.concat_lastdim([z_i0, z_e])
            if self.ip_embed is not None:
                z = ag.relu(self.ip_embed(joint))
            if self.mp_embed is not None:
                guide = ag.relu(self.mp_embed(joint))
        for block in self.blocks:
            z = block(z, guide, trace)
            if trace is not None:
                trace.setdefault("widths", []).append(z.shape[-1])
        return z


class ImagePadding(Module):
    """Residual static MLP z + W2 relu(W1 z), used to equalize baseline parameter counts."""

    def __init__(self, dim: int, width: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, width, rng)
        self.fc2 = Linear(width, dim, rng)

    def forward(self, z: Tensor) -> Tensor:
        return z + self.fc2(ag.relu(self.fc1(z)))


class FusionModel(Module):
    """Image encoder + metadata backbone + fusion strategy + classifier head."""

    def __init__(self, encoder_cfg: ImageEncoderConfig, backbone_cfg: MetadataBackboneConfig,
                 fusion_cfg: FusionConfig, seed: int = 0):
        fusion_cfg.validate()
        self.encoder_cfg, self.backbone_cfg, self.fusion_cfg = encoder_cfg, backbone_cfg, fusion_cfg
        rng = np.random.default_rng([seed, 7919])
        self.strategy = fusion_cfg.strategy
        d_i = encoder_cfg.output_dim
        d_e = backbone_cfg.embed_dim
        C = fusion_cfg.num_classes
        self.encoder = ImageEncoder(encoder_cfg, rng)
        self.metadata = None if self.strategy == "image_only" else MetadataBackbone(backbone_cfg, rng)
        self.padding = ImagePadding(d_i, fusion_cfg.pad_width, rng) if fusion_cfg.pad_width > 0 else None
        self.adapters = self.dynamic = self.head_e = None
        if self.strategy == "concat":
            self.head = Linear(d_i + d_e, C, rng)
        else:
            self.head = Linear(d_i, C, rng)
        if self.strategy in ("addition", "multiplication"):
            self.head_e = Linear(d_e, C, rng)
        if self.strategy == "dynamic":
            self.adapters = ChannelAdapters(d_i, fusion_cfg.d, rng)
            self.dynamic = DynamicMLP(fusion_cfg, d_e, rng)

    def image_feature(self, features: Tensor) -> Tensor:
        z_i = self.encoder(features)
        return self.padding(z_i) if self.padding is not None else z_i

    def metadata_feature(self, encoded: Tensor) -> Tensor | None:
        return None if self.metadata is None else self.metadata(encoded)

    def head_input(self, z_i: Tensor, z_e: Tensor | None, trace: dict | None = None) -> Tensor:
        """The feature the (image-side) classifier head sees."""
        if self.strategy == "concat":
            return ag.concat_lastdim([z_i, z_e])
        if self.strategy == "dynamic":
            refined = self.dynamic(self.adapters.reduce(z_i), z_e, trace)
            return z_i + self.adapters.expand(refined)
        return z_i

    def fuse(self, z_i: Tensor, z_e: Tensor | None, trace: dict | None = None) -> Tensor:
        """Training scores: logits, or log of the unnormalized product for multiplication."""
        logits = self.head(self.head_input(z_i, z_e, trace))
        if self.strategy == "addition":
            return logits + self.head_e(z_e)
        if self.strategy == "multiplication":
            return ag.log_softmax(logits) + ag.log_softmax(self.head_e(z_e))
        return logits

    def forward(self, features: Tensor, encoded: Tensor, trace: dict | None = None) -> Tensor:
        z_i = self.image_feature(features)
        return self.fuse(z_i, self.metadata_feature(encoded), trace)

    def predict(self, features, encoded) -> np.ndarray:
        """Prediction vectors: probabilities for multiplication, logits otherwise."""
        with ag.no_grad():
            scores = self.forward(ag.as_tensor(features), ag.as_tensor(encoded))
        return to_prediction(scores.data, self.strategy)

    def embeddings(self, features, encoded, tap_point: str) -> np.ndarray:
        if tap_point not in ("pre_fusion", "post_fusion"):
            raise ValueError(f"unknown tap point {tap_point!r}; use pre_fusion or post_fusion")
        with ag.no_grad():
            z_i = self.image_feature(ag.as_tensor(features))
            if tap_point == "pre_fusion":
                return z_i.data
            z_e = self.metadata_feature(ag.as_tensor(encoded))
            return self.head_input(z_i, z_e).data

    def classifier_weight(self) -> np.ndarray:
        """(num_classes, feature_dim): one row per class of the final head."""
        return self.head.weight.data.T


def to_prediction(scores: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == "multiplication":
        return ag._softmax(scores)
    return scores


def fuse_and_classify(model: FusionModel, z_i: Tensor, z_e: Tensor | None) -> np.ndarray:
    with ag.no_grad():
        scores = model.fuse(ag.as_tensor(z_i), None if z_e is None else ag.as_tensor(z_e))
    return to_prediction(scores.data, model.strategy)
