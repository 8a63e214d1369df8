"""Toy backbones: a mean-pooled ViT classifier and a per-patch dense predictor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .batch_attention import BatchFormer, BatchFormerConfig
from .nn import EncoderBlock, Linear, Module, PatchEmbed, encoder_block_param_count
from .seeds import SeedStreams
from .tensor import ConfigError, Tensor
from .twostream import apply_insert, forward_backbone


@dataclass
class ModelConfig:
    arch: str = "vit"
    depth: int = 4
    dim: int = 32
    heads: int = 4
    patch: int = 4
    ffn_width: Optional[int] = None
    dropout: float = 0.0
    scale: str = "head"
    channels: int = 1
    height: int = 16
    width: int = 16
    num_classes: int = 10

    @property
    def ffn(self) -> int:
        return self.ffn_width or 4 * self.dim

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def validate(self) -> None:
        if self.arch not in ("vit", "dense"):
            raise ConfigError(f"unknown arch {self.arch!r}; expected 'vit' or 'dense'")
        if self.depth < 1:
            raise ConfigError("model depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"embedding dim {self.dim} is not divisible by {self.heads} heads")
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"image extents {self.height}x{self.width} not divisible by patch size {self.patch}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")


class _Trunk(Module):
    """Shared construction for both toy models."""

    def __init__(self, config: ModelConfig, bf_config: Optional[BatchFormerConfig],
                 streams: SeedStreams, single_stream: bool = False):
        config.validate()
        self.config = config
        self.bf_config = bf_config
        self.streams = streams
        self.single_stream = single_stream
        init = streams.get("init")
        drop = streams.get("dropout")
        self.patch_embed = PatchEmbed(config.channels, config.height, config.width,
                                      config.patch, config.dim, init)
        self.blocks = [
            EncoderBlock(config.dim, config.heads, config.ffn, config.dropout, init, drop,
                         scale=config.scale)
            for _ in range(config.depth)
        ]
        self.head = Linear(config.dim, config.num_classes, init)
        # built last so backbone init draws do not depend on the batchformer settings
        self.batchformer = (
            BatchFormer(bf_config, config.dim, config.depth, init, streams.get("batchformer"))
            if bf_config is not None else None
        )

    def _inserts_active(self, minibatch_inference: bool) -> bool:
        return self.batchformer is not None and (self.training or minibatch_inference)

    def trunk(self, images, minibatch_inference: bool = False, record: Optional[list] = None) -> Tensor:
        tokens = self.patch_embed(images)
        return forward_backbone(self, tokens, active=self._inserts_active(minibatch_inference),
                                single_stream=self.single_stream, record=record)

    def without_batchformer(self):
        stripped = type(self)(self.config, None, SeedStreams(self.streams.seed))
        stripped.load_state_dict({k: v.copy() for k, v in self.state_dict().items()
                                  if not k.startswith("batchformer.")})
        stripped.train(self.training)
        return stripped

    def batchformer_parameter_count(self) -> int:
        return self.batchformer.num_parameters() if self.batchformer is not None else 0


class TinyViT(_Trunk):
    """Patch embedding, post-norm encoder stack, mean pooling, linear head."""

    def __init__(self, config: ModelConfig, bf_config: Optional[BatchFormerConfig],
                 streams: SeedStreams, single_stream: bool = False):
        super().__init__(config, bf_config, streams, single_stream)

    def forward(self, images, minibatch_inference: bool = False, record: Optional[list] = None) -> Tensor:
        h = self.trunk(images, minibatch_inference, record)
        pooled = h.mean(axis=1)
        if self.batchformer is not None and self.batchformer.config.mode == "v1":
            pooled = apply_insert(pooled, lambda t: self.batchformer.transform(t, 0),
                                  active=self._inserts_active(minibatch_inference),
                                  is_first=True, single_stream=self.single_stream)
        return self.head(pooled)


class DensePatchNet(_Trunk):
    """Same trunk with the head applied to every token: logits ``[B, N, K]``."""

    def __init__(self, config: ModelConfig, bf_config: Optional[BatchFormerConfig],
                 streams: SeedStreams, single_stream: bool = False):
        if bf_config is not None and bf_config.mode == "v1":
            raise ConfigError("image-level (v1) batch attention has no dense counterpart")
        super().__init__(config, bf_config, streams, single_stream)

    def forward(self, images, minibatch_inference: bool = False, record: Optional[list] = None) -> Tensor:
        return self.head(self.trunk(images, minibatch_inference, record))


def build_model(config: ModelConfig, bf_config: Optional[BatchFormerConfig], streams: SeedStreams,
                single_stream: bool = False) -> _Trunk:
    cls = TinyViT if config.arch == "vit" else DensePatchNet
    return cls(config, bf_config, streams, single_stream)


def classify_forward(model: TinyViT, images, minibatch_inference: bool = False) -> Tensor:
    return model(images, minibatch_inference=minibatch_inference)


def dense_forward(model: DensePatchNet, images, minibatch_inference: bool = False) -> Tensor:
    return model(images, minibatch_inference=minibatch_inference)


def expected_parameter_count(config: ModelConfig, bf_config: Optional[BatchFormerConfig] = None) -> int:
    """Closed-form parameter count for :func:`build_model`."""
    c, n = config.dim, config.num_patches
    patch_in = config.channels * config.patch * config.patch
    count = (patch_in * c + c) + n * c
    count += config.depth * encoder_block_param_count(c, config.ffn)
    count += c * config.num_classes + config.num_classes
    if bf_config is not None:
        modules = 1 if (bf_config.shared_instance or bf_config.mode == "v1") else len(bf_config.insert_positions)
        count += modules * encoder_block_param_count(c, bf_config.ffn_width or c)
    return count
