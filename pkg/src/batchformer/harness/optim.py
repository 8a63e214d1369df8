"""AdamW / SGD with per-group weight decay and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..nn import Module, Parameter


@dataclass
class ParamGroup:
    name: str
    params: list
    weight_decay: float


@dataclass
class AdamState:
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adamw_step(p: np.ndarray, g: np.ndarray, state: AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """In-place AdamW update of ``p`` (decoupled decay, bias-corrected moments)."""
    b1, b2 = betas
    if state.m is None:
        state.m = np.zeros_like(p)
        state.v = np.zeros_like(p)
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    if weight_decay:
        p -= lr * weight_decay * p
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


@dataclass
class SGDState:
    buf: Optional[np.ndarray] = None


def sgd_step(p: np.ndarray, g: np.ndarray, state: SGDState, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> SGDState:
    """In-place SGD with heavy-ball momentum and L2 weight decay."""
    if weight_decay:
        g = g + weight_decay * p
    if momentum:
        if state.buf is None:
            state.buf = g.copy()
        else:
            state.buf *= momentum
            state.buf += g
        g = state.buf
    p -= lr * g
    return state


class Optimizer:
    def __init__(self, groups: list[ParamGroup], algorithm: str = "adamw", betas=(0.9, 0.999),
                 eps: float = 1e-8, momentum: float = 0.9):
        self.groups = groups
        self.algorithm = algorithm
        self.betas = tuple(betas)
        self.eps = eps
        self.momentum = momentum
        self.state: dict[int, object] = {}

    def step(self, lr: float) -> None:
        for group in self.groups:
            for p in group.params:
                if p.grad is None:
                    continue
                grad = p.grad.astype(p.dtype, copy=False)
                if self.algorithm == "adamw":
                    st = self.state.setdefault(id(p), AdamState())
                    adamw_step(p.data, grad, st, lr, self.betas, self.eps, group.weight_decay)
                else:
                    st = self.state.setdefault(id(p), SGDState())
                    sgd_step(p.data, grad, st, lr, self.momentum, group.weight_decay)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None


def _decays(name: str, p: Parameter) -> bool:
    return p.ndim >= 2 and not name.endswith("pos_embed")


def build_param_groups(model: Module, weight_decay: float,
                       bf_weight_decay: Optional[float] = None) -> list[ParamGroup]:
    """Split parameters into decayed / non-decayed groups, backbone vs batch attention.

    Biases, norm affines and the positional embedding are never decayed.
    ``bf_weight_decay`` overrides the decay of batch-attention weights.
    """
    buckets: dict[str, list] = {"decay": [], "no_decay": [], "bf_decay": [], "bf_no_decay": []}
    for name, p in model.named_parameters():
        prefix = "bf_" if name.startswith("batchformer.") else ""
        buckets[prefix + ("decay" if _decays(name, p) else "no_decay")].append(p)
    bf_wd = weight_decay if bf_weight_decay is None else bf_weight_decay
    wd = {"decay": weight_decay, "no_decay": 0.0, "bf_decay": bf_wd, "bf_no_decay": 0.0}
    return [ParamGroup(k, v, wd[k]) for k, v in buckets.items() if v]


def cosine_warmup_lr(step: int, total: int, warmup: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return lr_max * step / warmup
    if total <= warmup:
        return lr_max
    progress = min(1.0, (step - warmup) / (total - warmup))
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))

