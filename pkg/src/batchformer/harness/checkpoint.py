"""Checkpoint files: a JSON header followed by a raw little-endian payload.

Layout::

    8 bytes   magic  b"BFCKPT\\x00\\x01"
    8 bytes   header length in bytes (uint64, little-endian)
    n bytes   UTF-8 JSON header
    m bytes   parameter payload, tensors back to back in registry order

The header's ``params`` registry maps each name to ``shape``, ``dtype``
(``"<f4"`` or ``"<f8"``), ``offset`` and ``nbytes`` within the payload.
Offsets are contiguous and exhaustive; ``payload_bytes`` and
``payload_sha256`` are checked on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..models import build_model
from ..seeds import SeedStreams
from ..tensor import DataError
from .config import RunConfig

MAGIC = b"BFCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(DataError):
    """Checkpoint file is malformed or inconsistent."""


def encode_checkpoint(state: dict[str, np.ndarray], config: RunConfig, stripped: bool) -> bytes:
    registry = []
    chunks = []
    offset = 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        registry.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": "batchformer-checkpoint",
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "stripped": bool(stripped),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "params": registry,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a batchformer checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = blob[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, header declares {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    state: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["params"]:
        if entry["offset"] != expected:
            raise CheckpointError(f"parameter {entry['name']} offset {entry['offset']} is not contiguous")
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != entry["nbytes"]:
            raise CheckpointError(f"parameter {entry['name']} size does not match its shape")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        expected += entry["nbytes"]
    if expected != len(payload):
        raise CheckpointError("parameter registry does not cover the whole payload")
    return header, state


def save_checkpoint(path, model, config: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stripped = getattr(model, "batchformer", None) is None
    path.write_bytes(encode_checkpoint(model.state_dict(), config, stripped))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path, seed: Optional[int] = None):
    """Rebuild the model described by a checkpoint. Returns ``(model, config, header)``."""
    header, state = read_checkpoint(path)
    config = RunConfig.from_dict(header["config"])
    bf = None if header["stripped"] else config.batchformer_config()
    streams = SeedStreams(config.seed if seed is None else seed)
    model = build_model(config.model_config(), bf, streams, single_stream=config.ablation.single_stream)
    dtype = next(iter(state.values())).dtype if state else np.float64
    for p in model.parameters():
        p.data = p.data.astype(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, config, header
