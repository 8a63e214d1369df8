"""Export batch-attention weights of one insert layer as CSV and PGM files.

For a batch of ``B`` images and an insert at layer ``L`` the dump contains

* ``attn_L{L}_pos{n:03d}.csv``: the head-averaged ``B x B`` weights at token
  position ``n`` (row ``i`` is how sample ``i`` attends over the batch);
* ``heat_L{L}_sample{b:03d}.pgm``: for sample ``b``, the attention mass it
  receives from the other samples at every position, laid out on the
  ``H/P x W/P`` token grid and min-max scaled to 0..255 (binary P5);
* ``index.json`` listing the files and the batch source indices.

Image-level (v1) batch attention has a single position and no token grid,
so only its CSV is written.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import tensor as T
from ..batch_attention import batch_attention_v1, batch_attention_v2
from ..tensor import ConfigError
from ..twostream import forward_backbone


def capture_attention(model, images: np.ndarray, layer: int) -> np.ndarray:
    """Weights ``[N, heads, B, B]`` of the insert at ``layer`` (mini-batch inference, eval mode)."""
    bf = getattr(model, "batchformer", None)
    if bf is None:
        raise ConfigError("model has no batch-attention module (stripped checkpoint?)")
    if layer not in bf.positions:
        raise ConfigError(f"layer {layer} is not an insert position; inserts are at {list(bf.positions)}")
    captured: dict[int, np.ndarray] = {}

    def probe(x, position):
        block = bf.block_for(position)
        fn = batch_attention_v1 if bf.config.mode == "v1" else batch_attention_v2
        out, weights = fn(x, block, return_attn=True)
        if position == layer:
            captured[layer] = weights
        return out

    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            if bf.config.mode == "v1":
                pooled = model.trunk(images).mean(axis=1)
                probe(pooled, 0)
            else:
                tokens = model.patch_embed(images)
                forward_backbone(model, tokens, active=True, single_stream=model.single_stream,
                                 transform=probe)
    finally:
        model.train(was_training)
    return np.asarray(captured[layer], dtype=np.float64)


def received_mass(weights: np.ndarray) -> np.ndarray:
    """``[B, N]``: per sample and position, attention received from the other samples."""
    avg = weights.mean(axis=1)                       # [N, B, B]
    off = avg.sum(axis=1) - np.einsum("nbb->nb", avg)  # column sums minus self weight
    return off.T


def to_gray8(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def attn_dump(model, images: np.ndarray, layer: int, out_dir,
              source_index: Optional[Sequence[int]] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = capture_attention(model, images, layer)
    n_pos = weights.shape[0]
    csv_files = []
    avg = weights.mean(axis=1)
    for n in range(n_pos):
        path = out / f"attn_L{layer}_pos{n:03d}.csv"
        write_matrix_csv(path, avg[n])
        csv_files.append(path.name)

    pgm_files = []
    if model.batchformer.config.mode == "v2":
        cfg = model.config
        gh, gw = cfg.height // cfg.patch, cfg.width // cfg.patch
        mass = received_mass(weights)
        for b in range(mass.shape[0]):
            path = out / f"heat_L{layer}_sample{b:03d}.pgm"
            write_pgm(path, to_gray8(mass[b].reshape(gh, gw)))
            pgm_files.append(path.name)

    index = {
        "layer": layer,
        "batch_size": int(images.shape[0]),
        "positions": n_pos,
        "heads": int(weights.shape[1]),
        "source_index": None if source_index is None else [int(i) for i in source_index],
        "csv": csv_files,
        "pgm": pgm_files,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return index
