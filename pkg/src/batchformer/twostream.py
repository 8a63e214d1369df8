"""Two-stream training around batch-attention inserts.

At the first insert the mini-batch is duplicated: rows ``[0, B)`` carry the
original stream and rows ``[B, 2B)`` the batch-attention stream. Later
inserts split the halves, transform only the second one and re-concatenate.
Every backbone layer and the prediction head see both halves, so their
weights are shared between the streams. Outside training (and unless
mini-batch inference is requested) every insert is the identity, which makes
the trained backbone usable without any batch-attention parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PipelineError(RuntimeError):
    """The original/transformed stream pairing is broken."""


@dataclass
class TwoStreamBatch:
    features: Tensor
    labels: np.ndarray
    first_insert_done: bool

    def __post_init__(self) -> None:
        if self.first_insert_done and len(self.features) % 2:
            raise PipelineError(f"two-stream batch with odd leading extent {len(self.features)}")


def apply_insert(x: Tensor, transform: Callable[[Tensor], Tensor], *, active: bool,
                 is_first: bool, single_stream: bool = False) -> Tensor:
    """One insertion step.

    ``active=False`` returns ``x`` itself. With ``single_stream`` the
    transform replaces ``x`` in place (no untouched copy is kept).
    """
    if not active:
        return x
    if single_stream:
        return transform(x)
    if is_first:
        return T.concat_axis0([x, transform(x)])
    n = len(x)
    if n % 2:
        raise PipelineError(f"insert after the first needs an even leading extent, got {n}")
    orig, branch = T.split_axis0(x, n // 2)
    return T.concat_axis0([orig, transform(branch)])


def duplicate_labels(labels: np.ndarray) -> np.ndarray:
    """``[l0, .., l_{B-1}] -> [l0, .., l_{B-1}, l0, .., l_{B-1}]`` (stream order)."""
    labels = np.asarray(labels)
    return np.concatenate([labels, labels], axis=0)


def transformed_half(logits: np.ndarray) -> np.ndarray:
    n = len(logits)
    if n % 2:
        raise PipelineError(f"cannot take the transformed half of {n} rows")
    return logits[n // 2:]


def original_half(logits: np.ndarray) -> np.ndarray:
    n = len(logits)
    if n % 2:
        raise PipelineError(f"cannot take the original half of {n} rows")
    return logits[: n // 2]


def forward_backbone(model, tokens: Tensor, *, active: bool, single_stream: bool = False,
                     record: Optional[list] = None,
                     transform: Optional[Callable[[Tensor, int], Tensor]] = None) -> Tensor:
    """Run ``model.blocks`` with inserts applied at each planned layer input.

    ``record`` (if given) receives the activation entering each layer after
    its insert, then the final output. ``transform`` overrides the model's
    batch-attention transform (used by tracer probes).
    """
    bf = getattr(model, "batchformer", None)
    positions = set(bf.positions) if (bf is not None and bf.config.mode == "v2") else set()
    fn = transform or (bf.transform if bf is not None else None)
    first = True
    h = tokens
    for layer, block in enumerate(model.blocks):
        if layer in positions:
            h = apply_insert(h, lambda t, _l=layer: fn(t, _l), active=active,
                             is_first=first, single_stream=single_stream)
            first = False
        if record is not None:
            record.append(h.data)
        h = block(h)
    if record is not None:
        record.append(h.data)
    return h


def forward_two_stream(model, images, *, minibatch_inference: bool = False,
                       record: Optional[list] = None) -> Tensor:
    """Model forward honouring its train/eval mode.

    In training mode inserts are active. In eval mode they are identities
    unless ``minibatch_inference`` is set, in which case they run (with
    dropout inert) and both halves are returned.
    """
    return model.forward(images, minibatch_inference=minibatch_inference, record=record)


def two_stream_loss(logits: Tensor, labels: np.ndarray, bf_weight: float = 1.0) -> Tensor:
    """Cross-entropy over all rows, duplicating labels when the rows are doubled.

    ``logits`` is ``[M, K]`` or ``[M, N, K]`` (per-token). With ``bf_weight=1``
    the result equals the unweighted mean over every row of both streams.
    """
    labels = np.asarray(labels)
    rows = logits.shape[0]
    if rows == 2 * labels.shape[0]:
        labels = duplicate_labels(labels)
        doubled = True
    elif rows == labels.shape[0]:
        doubled = False
    else:
        raise PipelineError(f"{rows} logit rows cannot pair with {labels.shape[0]} labels")

    def ce(z: Tensor, y: np.ndarray) -> Tensor:
        if z.ndim == 3:
            m, n, k = z.shape
            return T.cross_entropy(z.reshape(m * n, k), y.reshape(m * n))
        return T.cross_entropy(z, y)

    if not doubled or bf_weight == 1.0:
        return ce(logits, labels)
    half = rows // 2
    orig, branch = T.split_axis0(logits, half)
    return (ce(orig, labels[:half]) + ce(branch, labels[half:]) * bf_weight) * (1.0 / (1.0 + bf_weight))


def strip_for_export(model):
    """Copy of ``model`` with every batch-attention parameter removed.

    The result is exactly the baseline architecture and shares no arrays with
    the source model.
    """
    return model.without_batchformer()
