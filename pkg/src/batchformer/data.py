"""Deterministic toy datasets and an IDX (MNIST-style) reader.

Everything generated here is a pure function of ``(manifest, seed)``.
"""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .seeds import SeedStreams
from .tensor import ConfigError, DataError

KINDS = ("synthetic-cls", "synthetic-dense", "idx-files")


class FormatError(DataError):
    """Malformed IDX file."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class DatasetManifest:
    kind: str = "synthetic-cls"
    num_classes: int = 10
    samples_per_class: int = 125
    long_tail_head: Optional[int] = None
    long_tail_ratio: float = 1.0
    channels: int = 1
    height: int = 16
    width: int = 16
    noise: float = 1.0
    blobs: int = 3
    num_samples: int = 250
    max_objects: int = 3
    patch: int = 4
    train_fraction: float = 0.8
    seed: Optional[int] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 1 or self.samples_per_class < 1 or self.num_samples < 1:
            raise ConfigError("dataset counts must be positive")
        if not 0.0 < self.long_tail_ratio <= 1.0:
            raise ConfigError(f"long-tail ratio must lie in (0, 1], got {self.long_tail_ratio}")
        if self.long_tail_head is not None and self.long_tail_head < 1:
            raise ConfigError("long-tail head count must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.kind == "synthetic-dense":
            if self.num_classes < 2:
                raise ConfigError("dense task needs background plus at least one object id")
            if self.height % self.patch or self.width % self.patch:
                raise ConfigError("dense image extents must be divisible by the patch size")
            if not 1 <= self.max_objects <= self.num_classes - 1:
                raise ConfigError("max_objects must lie in [1, num_classes - 1]")
        if self.kind == "idx-files" and not (self.train_images and self.train_labels):
            raise ConfigError("idx-files manifest needs train_images and train_labels paths")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown manifest keys: {unknown}")
        m = cls(**d)
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Images ``[M, Ch, H, W]`` with labels ``[M]`` (classes) or ``[M, N]`` (per patch)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    source_index: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.source_index is None:
            self.source_index = np.arange(len(self.images))
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dense(self) -> bool:
        return self.labels.ndim == 2

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.num_classes)

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.source_index[idx])


def _data_rng(manifest: DatasetManifest, seed: Optional[int]) -> np.random.Generator:
    s = manifest.seed if manifest.seed is not None else (seed or 0)
    return SeedStreams(s).get("data")


def _blob_template(rng: np.random.Generator, channels: int, h: int, w: int, blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((channels, h, w))
    for c in range(channels):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(1.5, 0.25 * max(h, w) + 1.5)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
            img[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img -= img.mean()
    std = img.std()
    return img / std if std > 0 else img


def _stratified_split(labels: np.ndarray, num_classes: int, train_fraction: float):
    train, test = [], []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        cut = int(round(train_fraction * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.concatenate(train), np.concatenate(test)


def gen_synthetic_cls(manifest: DatasetManifest, seed: Optional[int] = None) -> tuple[Dataset, Dataset]:
    """Per-class Gaussian-blob templates plus i.i.d. Gaussian pixel noise.

    Returns ``(train, test)`` split 80/20 (per class, deterministic). If the
    manifest carries a long-tail head count the training split is resampled.
    """
    manifest.validate()
    rng = _data_rng(manifest, seed)
    k, n = manifest.num_classes, manifest.samples_per_class
    ch, h, w = manifest.channels, manifest.height, manifest.width
    templates = np.stack([_blob_template(rng, ch, h, w, manifest.blobs) for _ in range(k)])
    labels = np.repeat(np.arange(k), n)
    noise = rng.standard_normal((k * n, ch, h, w)) * manifest.noise
    images = templates[labels] + noise
    tr, te = _stratified_split(labels, k, manifest.train_fraction)
    full = Dataset(images, labels, k)
    train, test = full.subset(tr), full.subset(te)
    if manifest.long_tail_head is not None:
        train = long_tail_resample(train, manifest.long_tail_head, manifest.long_tail_ratio)
    return train, test


def long_tail_counts(num_classes: int, head: int, ratio: float) -> list[int]:
    # the tolerance keeps e.g. 100 * 0.1**2 = 1.0000000000000002 from rounding up to 2
    return [max(1, math.ceil(head * ratio ** c - 1e-9)) for c in range(num_classes)]


def long_tail_resample(dataset: Dataset, head: int, ratio: float) -> Dataset:
    """Keep the first ``ceil(head * ratio**c)`` samples of class ``c`` (capped at availability)."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"long-tail ratio must lie in (0, 1], got {ratio}")
    target = long_tail_counts(dataset.num_classes, head, ratio)
    keep = []
    for c, want in enumerate(target):
        idx = np.flatnonzero(dataset.labels == c)
        keep.append(idx[:want])
    return dataset.subset(np.sort(np.concatenate(keep)))


def bucket_classes(counts, head: Optional[int] = None, many_frac: float = 0.2,
                   few_frac: float = 0.05) -> dict[str, list[int]]:
    """Many/med/few partition by training count relative to the head count."""
    counts = np.asarray(counts)
    head = int(counts.max()) if head is None else head
    buckets: dict[str, list[int]] = {"many": [], "med": [], "few": []}
    for c, n in enumerate(counts):
        if n > many_frac * head:
            buckets["many"].append(c)
        elif n < few_frac * head:
            buckets["few"].append(c)
        else:
            buckets["med"].append(c)
    return buckets


def label_patches(id_map: np.ndarray, patch: int, num_classes: int) -> np.ndarray:
    """Majority pixel id inside each patch, row-major grid order; ties go to the lower id."""
    h, w = id_map.shape
    gh, gw = h // patch, w // patch
    cells = id_map.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)
    onehot = cells[..., None] == np.arange(num_classes)
    return onehot.sum(axis=1).argmax(axis=1)


def gen_synthetic_dense(manifest: DatasetManifest, seed: Optional[int] = None) -> tuple[Dataset, Dataset]:
    """Images with 1..max_objects axis-aligned rectangles; per-patch majority labels.

    Object id ``k`` (1..K-1) is painted with intensity ``k / (K-1)``; id 0 is
    background. Later rectangles overwrite earlier ones.
    """
    manifest.validate()
    rng = _data_rng(manifest, seed)
    k, m = manifest.num_classes, manifest.num_samples
    h, w, ch, p = manifest.height, manifest.width, manifest.channels, manifest.patch
    images = np.zeros((m, ch, h, w))
    labels = np.zeros((m, (h // p) * (w // p)), dtype=np.int64)
    lo_h, lo_w = max(2, h // 8), max(2, w // 8)
    for i in range(m):
        id_map = np.zeros((h, w), dtype=np.int64)
        n_obj = int(rng.integers(1, manifest.max_objects + 1))
        for obj in rng.choice(np.arange(1, k), size=n_obj, replace=False):
            rh = int(rng.integers(lo_h, h // 2 + 1))
            rw = int(rng.integers(lo_w, w // 2 + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            id_map[y0:y0 + rh, x0:x0 + rw] = obj
        images[i] = (id_map / (k - 1))[None]
        labels[i] = label_patches(id_map, p, k)
    if manifest.noise:
        images = images + rng.standard_normal(images.shape) * manifest.noise
    cut = int(round(manifest.train_fraction * m))
    full = Dataset(images, labels, k)
    return full.subset(np.arange(cut)), full.subset(np.arange(cut, m))


# -- IDX -----------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its declared type and extents."""
    if len(raw) < 4:
        raise FormatError("file shorter than the 4-byte magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"bad magic {raw[:2].hex()}, expected 0000", 0)
    type_code, rank = raw[2], raw[3]
    if type_code not in _IDX_TYPES:
        raise FormatError(f"unknown element type 0x{type_code:02x}", 2)
    if rank == 0:
        raise FormatError("rank byte is zero", 3)
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"truncated header: need {header_end} bytes for rank {rank}", len(raw))
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    dtype = _IDX_TYPES[type_code]
    need = header_end + math.prod(dims) * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"truncated payload: need {need} bytes, file has {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after payload", need)
    return np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=header_end).reshape(dims)


def read_idx_array(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def read_idx(images_path, labels_path=None, num_classes: Optional[int] = None) -> Dataset:
    """Load IDX images (rank 3, scaled to [0, 1]) and optional rank-1 labels."""
    raw = _read_bytes(images_path)
    arr = parse_idx(raw)
    if arr.ndim != 3:
        raise FormatError(f"image file must have rank 3, got rank {arr.ndim}", 3)
    if arr.dtype == np.uint8:
        images = arr.astype(np.float64) / 255.0
    else:
        images = arr.astype(np.float64)
        lo, hi = images.min(), images.max()
        images = (images - lo) / (hi - lo) if hi > lo else np.zeros_like(images)
    images = images[:, None, :, :]
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        lab_raw = _read_bytes(labels_path)
        lab = parse_idx(lab_raw)
        if lab.ndim != 1:
            raise FormatError(f"label file must have rank 1, got rank {lab.ndim}", 3)
        if len(lab) != len(images):
            raise DataError(f"{len(images)} images but {len(lab)} labels")
        labels = lab.astype(np.int64)
    k = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(images, labels, k)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as IDX (uint8 / int32 / float64 element types)."""
    array = np.asarray(array)
    codes = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("int32"): 0x0C,
             np.dtype("float32"): 0x0D, np.dtype("float64"): 0x0E, np.dtype("int16"): 0x0B}
    code = codes.get(array.dtype)
    if code is None:
        raise ConfigError(f"IDX cannot store dtype {array.dtype}")
    out = _IDX_TYPES[code]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(out).tobytes())


def load_datasets(manifest: DatasetManifest, seed: Optional[int] = None) -> tuple[Dataset, Dataset]:
    if manifest.kind == "synthetic-cls":
        return gen_synthetic_cls(manifest, seed)
    if manifest.kind == "synthetic-dense":
        return gen_synthetic_dense(manifest, seed)
    train = read_idx(manifest.train_images, manifest.train_labels, manifest.num_classes)
    if manifest.test_images:
        test = read_idx(manifest.test_images, manifest.test_labels, manifest.num_classes)
    else:
        tr, te = _stratified_split(train.labels, train.num_classes, manifest.train_fraction)
        train, test = train.subset(tr), train.subset(te)
    if manifest.long_tail_head is not None:
        train = long_tail_resample(train, manifest.long_tail_head, manifest.long_tail_ratio)
    return train, test


def iterate_batches(dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None,
                    drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
