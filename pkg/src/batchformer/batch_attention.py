"""Attention along the mini-batch axis.

``batch_attention_v2`` treats the features at each token position as a
sequence of length B and runs one shared encoder block over all N such
sequences. ``batch_attention_v1`` is the image-level special case (N = 1).
No positional encoding is applied over the batch axis, so both are
equivariant to any reordering of the samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import EncoderBlock, Module
from .tensor import ConfigError, DataError, Tensor

DEFAULT_HEADS = 4
DEFAULT_DROPOUT = 0.5


@dataclass
class BatchFormerConfig:
    """Settings of the batch-attention modules attached to a backbone.

    ``insert_positions`` are 0-based encoder-layer indices whose *input* is
    transformed. ``ffn_width=None`` means "same as the embedding width".
    """

    mode: str = "v2"
    heads: int = DEFAULT_HEADS
    dropout: float = DEFAULT_DROPOUT
    ffn_width: Optional[int] = None
    insert_positions: Sequence[int] = field(default_factory=lambda: (0,))
    shared_instance: bool = False
    scale: str = "head"

    def validate(self, dim: int, depth: int) -> None:
        if self.mode not in ("v1", "v2"):
            raise ConfigError(f"batchformer mode must be 'v1' or 'v2', got {self.mode!r}")
        if self.heads < 1 or dim % self.heads:
            raise ConfigError(f"batchformer heads {self.heads} do not divide embedding dim {dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"batchformer dropout must lie in [0, 1), got {self.dropout}")
        positions = list(self.insert_positions)
        if self.mode == "v2":
            if not positions:
                raise ConfigError("v2 batchformer needs at least one insert position")
            if any(b <= a for a, b in zip(positions, positions[1:])):
                raise ConfigError(f"insert positions must be strictly increasing, got {positions}")
            if positions[0] < 0 or positions[-1] >= depth:
                raise ConfigError(f"insert positions {positions} outside model depth {depth}")


class BatchFormer(Module):
    """Batch-attention blocks, one per insert position or one shared.

    Sharing across token positions is inherent (a single block processes all
    N position-sequences); ``shared_instance`` additionally shares one block
    across insert positions.
    """

    def __init__(self, config: BatchFormerConfig, dim: int, depth: int,
                 rng: np.random.Generator, dropout_rng: Optional[np.random.Generator] = None):
        config.validate(dim, depth)
        self.config = config
        self.dim = dim
        ffn = config.ffn_width or dim
        positions = list(config.insert_positions) if config.mode == "v2" else [0]
        n_blocks = 1 if (config.shared_instance or config.mode == "v1") else len(positions)
        self.blocks = [
            EncoderBlock(dim, config.heads, ffn, config.dropout, rng, dropout_rng, scale=config.scale)
            for _ in range(n_blocks)
        ]
        self.positions = tuple(positions)
        self._slot = {pos: (0 if n_blocks == 1 else i) for i, pos in enumerate(positions)}

    def block_for(self, position: int) -> EncoderBlock:
        return self.blocks[self._slot[position]]

    def transform(self, x: Tensor, position: int) -> Tensor:
        block = self.block_for(position)
        if self.config.mode == "v1":
            return batch_attention_v1(x, block)
        return batch_attention_v2(x, block)


def batch_attention_v2(x: Tensor, block: EncoderBlock, return_attn: bool = False):
    """``[B, N, C] -> [B, N, C]``: attention across samples at each position.

    With ``return_attn`` the per-position weights ``[N, heads, B, B]`` are
    returned as well. Reductions over the batch run in sorted order, so
    permuting the samples permutes the output bitwise.
    """
    if x.ndim != 3:
        raise T.DimensionError(f"batch attention expects [B, N, C], got {x.shape}")
    if x.shape[0] == 0:
        raise DataError("batch attention needs at least one sample (B = 0)")
    seqs = x.permute(1, 0, 2)
    out = block(seqs, return_attn=return_attn, exact=True)
    if return_attn:
        out, weights = out
        return out.permute(1, 0, 2), weights
    return out.permute(1, 0, 2)


def batch_attention_v1(x: Tensor, block: EncoderBlock, return_attn: bool = False):
    """``[B, C] -> [B, C]``: one sequence of length B over image-level features."""
    if x.ndim != 2:
        raise T.DimensionError(f"image-level batch attention expects [B, C], got {x.shape}")
    b, c = x.shape
    out = batch_attention_v2(x.reshape(b, 1, c), block, return_attn=return_attn)
    if return_attn:
        out, weights = out
        return out.reshape(b, c), weights
    return out.reshape(b, c)


def position_locality_probe(x: np.ndarray, block: EncoderBlock, i: int, j: int, delta: float) -> bool:
    """True iff shifting every sample's features at position ``j`` by ``delta``
    leaves the batch-attention output at position ``i`` bitwise unchanged."""
    x = np.asarray(x)
    n = x.shape[1]
    if i == j:
        raise ValueError("locality probe needs two distinct positions")
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"positions {i}, {j} out of range for N={n}")
    perturbed = x.copy()
    perturbed[:, j, :] += delta
    with T.no_grad():
        base = batch_attention_v2(Tensor(x, dtype=x.dtype), block).data
        moved = batch_attention_v2(Tensor(perturbed, dtype=x.dtype), block).data
    return bool(np.array_equal(base[:, i], moved[:, i]))
