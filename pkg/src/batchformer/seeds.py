"""Named, counter-based random streams.

Each stochastic consumer (weight init, dropout, batchformer dropout, data
sampling, ...) draws from its own Philox stream whose 128-bit key is derived
from ``(seed, name)``. Changing how much one consumer draws never shifts the
numbers another consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("init", "dropout", "batchformer", "sampler", "data", "eval")


def stream_key(seed: int, name: str) -> tuple[int, int]:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little")


class SeedStreams:
    """Lazily created ``numpy.random.Generator`` per stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            key = np.array(stream_key(self.seed, name), dtype=np.uint64)
            gen = np.random.Generator(np.random.Philox(key=key))
            self._streams[name] = gen
        return gen

    __getitem__ = get

    def describe(self) -> dict[str, str]:
        """Hex keys of every stream touched so far (written to metrics headers)."""
        names = sorted(set(self._streams) | set(STREAM_NAMES))
        return {n: "%016x%016x" % stream_key(self.seed, n)[::-1] for n in names}
