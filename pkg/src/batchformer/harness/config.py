"""Run configuration: nested dataclasses with strict JSON (de)serialization."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from ..batch_attention import BatchFormerConfig
from ..data import DatasetManifest
from ..models import ModelConfig
from ..tensor import ConfigError


@dataclass
class ModelSection:
    arch: str = "vit"
    depth: int = 4
    dim: int = 32
    heads: int = 4
    patch: int = 4
    ffn_width: Optional[int] = None
    dropout: float = 0.0
    scale: str = "head"


@dataclass
class BatchFormerSection:
    enabled: bool = True
    mode: str = "v2"
    insert_positions: list = field(default_factory=lambda: [0])
    shared: bool = False
    heads: int = 4
    dropout: float = 0.5
    ffn_width: Optional[int] = None
    scale: str = "head"
    weight_decay: Optional[float] = None


@dataclass
class OptimSection:
    algorithm: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    momentum: float = 0.9
    warmup_epochs: int = 3
    cosine: bool = True
    epochs: int = 50
    batch_size: int = 16
    eval_batch_size: int = 16


@dataclass
class AblationSection:
    single_stream: bool = False
    minibatch_inference_eval: bool = False
    stream_weight: float = 1.0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    batchformer: BatchFormerSection = field(default_factory=BatchFormerSection)
    data: DatasetManifest = field(default_factory=DatasetManifest)
    optim: OptimSection = field(default_factory=OptimSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    seed: int = 0
    precision: str = "float32"

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        d = self.to_dict()
        for item in assignments:
            apply_override(d, item)
        return RunConfig.from_dict(d)

    # -- derived objects ---------------------------------------------------
    def model_config(self) -> ModelConfig:
        m, dm = self.model, self.data
        return ModelConfig(arch=m.arch, depth=m.depth, dim=m.dim, heads=m.heads, patch=m.patch,
                           ffn_width=m.ffn_width, dropout=m.dropout, scale=m.scale,
                           channels=dm.channels, height=dm.height, width=dm.width,
                           num_classes=dm.num_classes)

    def batchformer_config(self) -> Optional[BatchFormerConfig]:
        b = self.batchformer
        if not b.enabled:
            return None
        return BatchFormerConfig(mode=b.mode, heads=b.heads, dropout=b.dropout, ffn_width=b.ffn_width,
                                 insert_positions=tuple(b.insert_positions),
                                 shared_instance=b.shared, scale=b.scale)

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        self.data.validate()
        mc = self.model_config()
        mc.validate()
        if self.model.arch == "dense" and self.data.kind != "synthetic-dense":
            raise ConfigError("dense arch needs a synthetic-dense dataset")
        if self.model.arch == "vit" and self.data.kind == "synthetic-dense":
            raise ConfigError("vit arch cannot train on per-patch labels")
        if self.model.arch == "dense" and self.data.patch != self.model.patch:
            raise ConfigError("dense dataset patch size must equal the model patch size")
        bf = self.batchformer_config()
        if bf is not None:
            bf.validate(mc.dim, mc.depth)
            if self.model.arch == "dense" and bf.mode == "v1":
                raise ConfigError("image-level (v1) batch attention has no dense counterpart")
        o = self.optim
        if o.algorithm not in ("adamw", "sgd"):
            raise ConfigError(f"optim.algorithm must be 'adamw' or 'sgd', got {o.algorithm!r}")
        if o.lr <= 0 or o.epochs < 1 or o.batch_size < 1 or o.eval_batch_size < 1:
            raise ConfigError("lr, epochs and batch sizes must be positive")
        if len(o.betas) != 2 or not all(0 <= b < 1 for b in o.betas):
            raise ConfigError(f"optim.betas must be two values in [0, 1), got {o.betas}")
        if o.warmup_epochs < 0 or o.warmup_epochs > o.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.ablation.stream_weight < 0:
            raise ConfigError("stream_weight must be non-negative")


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub is not None else copy.deepcopy(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_SECTIONS = {
    (RunConfig, "model"): ModelSection,
    (RunConfig, "batchformer"): BatchFormerSection,
    (RunConfig, "data"): DatasetManifest,
    (RunConfig, "optim"): OptimSection,
    (RunConfig, "ablation"): AblationSection,
}


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``"a.b.c=value"`` to a nested dict; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"override path {key!r}: unknown section {p!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"override path {key!r}: unknown key {parts[-1]!r}")
    node[parts[-1]] = value
