"""Transformer building blocks on top of :mod:`batchformer.tensor`."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module container: tracks parameters, children and train/eval mode.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order, so parameter names are stable across runs. A module or
    parameter reachable by several paths is reported once, under the first
    name it is found at.
    """

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children_items(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "", _seen: Optional[set] = None) -> Iterator[tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for name, value in self._children_items():
            full = f"{prefix}{name}"
            if id(value) in seen:
                continue
            seen.add(id(value))
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children_items():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.DimensionError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype, order="C")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(xavier_uniform(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.DimensionError(f"Linear expects last extent {self.in_dim}, got shape {x.shape}")
        if x.ndim == 2:
            # one gemm per row: a row's result must not depend on how many rows share the call
            b = x.shape[0]
            return (x.reshape(b, 1, self.in_dim) @ self.weight + self.bias).reshape(b, self.out_dim)
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class MultiHeadSelfAttention(Module):
    """Self-attention over axis 1 of an ``[S, L, C]`` input.

    ``scale="head"`` divides logits by sqrt(C / heads); ``scale="full"``
    divides by sqrt(C). ``forward(..., exact=True)`` performs the reductions
    over keys in sorted order, which makes the output bitwise equivariant to
    a permutation of the L tokens at some cost in speed.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, scale: str = "head"):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        if scale not in ("head", "full"):
            raise ConfigError(f"unknown attention scale {scale!r}")
        self.dim, self.heads, self.scale = dim, heads, scale
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    @property
    def divisor(self) -> float:
        return math.sqrt(self.dim // self.heads if self.scale == "head" else self.dim)

    def forward(self, x: Tensor, return_attn: bool = False, exact: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise T.DimensionError(f"attention expects [S, L, {self.dim}], got {x.shape}")
        s, l, c = x.shape
        h, d = self.heads, c // self.heads

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(s, l, h, d).permute(0, 2, 1, 3)

        q = split_heads(self.wq(x))
        k = split_heads(self.wk(x))
        v = split_heads(self.wv(x))
        if exact:
            logits = (q.reshape(s, h, l, 1, d) * k.reshape(s, h, 1, l, d)).sum(axis=-1) * (1.0 / self.divisor)
            attn = T.softmax_lastaxis(logits, ordered=True)
            z = T.ordered_sum(attn.reshape(s, h, l, l, 1) * v.reshape(s, h, 1, l, d), axis=-2)
        else:
            logits = (q @ k.permute(0, 1, 3, 2)) * (1.0 / self.divisor)
            attn = T.softmax_lastaxis(logits)
            z = attn @ v
        z = z.permute(0, 2, 1, 3).reshape(s, l, c)
        out = self.wo(z)
        if return_attn:
            return out, attn.data
        return out


def mhsa_forward(x: Tensor, p: MultiHeadSelfAttention, return_attn: bool = False, exact: bool = False):
    return p(x, return_attn=return_attn, exact=exact)


class EncoderBlock(Module):
    """Post-norm encoder block:
    ``x = norm1(x + drop(mhsa(x)))`` then ``x = norm2(x + drop(ffn(x)))``.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float,
                 rng: np.random.Generator, dropout_rng: Optional[np.random.Generator] = None,
                 scale: str = "head"):
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.dim, self.ffn_dim, self.dropout = dim, ffn_dim, dropout
        self.attn = MultiHeadSelfAttention(dim, heads, rng, scale=scale)
        self.norm1 = LayerNorm(dim)
        self.ffn1 = Linear(dim, ffn_dim, rng)
        self.ffn2 = Linear(ffn_dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout_rng = dropout_rng

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self.dropout_rng, self.training)

    def forward(self, x: Tensor, return_attn: bool = False, exact: bool = False):
        a = self.attn(x, return_attn=return_attn, exact=exact)
        if return_attn:
            a, weights = a
        x = self.norm1(x + self._drop(a))
        x = self.norm2(x + self._drop(self.ffn2(self.ffn1(x).relu())))
        if return_attn:
            return x, weights
        return x


def encoder_block_forward(x: Tensor, p: EncoderBlock, return_attn: bool = False, exact: bool = False):
    return p(x, return_attn=return_attn, exact=exact)


def encoder_block_param_count(dim: int, ffn_dim: int) -> int:
    return 4 * (dim * dim + dim) + 2 * (2 * dim) + (dim * ffn_dim + ffn_dim) + (ffn_dim * dim + dim)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, Ch, H, W] -> [B, N, Ch*P*P]`` with patches in row-major grid order."""
    if images.ndim != 4:
        raise T.DimensionError(f"images must be [B, Ch, H, W], got {images.shape}")
    b, ch, hgt, wid = images.shape
    if patch < 1 or hgt % patch or wid % patch:
        raise ConfigError(f"image extents {hgt}x{wid} not divisible by patch size {patch}")
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(b, ch, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, ch * patch * patch))


class PatchEmbed(Module):
    """Non-overlapping patches, linear projection, learned positional embedding."""

    def __init__(self, channels: int, height: int, width: int, patch: int, dim: int,
                 rng: np.random.Generator):
        if patch < 1 or height % patch or width % patch:
            raise ConfigError(f"image extents {height}x{width} not divisible by patch size {patch}")
        self.channels, self.height, self.width, self.patch = channels, height, width, patch
        self.grid = (height // patch, width // patch)
        self.num_patches = self.grid[0] * self.grid[1]
        self.proj = Linear(channels * patch * patch, dim, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(self.num_patches, dim)))

    def forward(self, images) -> Tensor:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.shape[1:] != (self.channels, self.height, self.width):
            raise T.DimensionError(
                f"expected images [B, {self.channels}, {self.height}, {self.width}], got {arr.shape}")
        tokens = Tensor._wrap(patchify(arr.astype(self.proj.weight.dtype, copy=False), self.patch))
        return self.proj(tokens) + self.pos_embed


def patch_embed(img, patch: int, proj: Linear, pos_embed: Optional[Tensor] = None) -> Tensor:
    """Functional form: project patches of ``img`` and add ``pos_embed`` if given."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    out = proj(Tensor._wrap(patchify(arr.astype(proj.weight.dtype, copy=False), patch)))
    return out + pos_embed if pos_embed is not None else out
