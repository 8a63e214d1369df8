"""Training loop, evaluation and metrics records."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import tensor as T
from ..data import Dataset, bucket_classes, iterate_batches, load_datasets
from ..models import build_model
from ..seeds import SeedStreams
from ..tensor import NonFiniteError
from ..twostream import original_half, strip_for_export, transformed_half, two_stream_loss
from .checkpoint import save_checkpoint
from .config import RunConfig
from .optim import Optimizer, build_param_groups, cosine_warmup_lr

logger = logging.getLogger(__name__)

EVAL_MODES = ("stripped", "minibatch_inference")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, op: str):
        self.epoch, self.step, self.op = epoch, step, op
        super().__init__(f"model diverged with non-finite values in op '{op}' at epoch {epoch}, step {step}")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    mode: str
    loss: float
    accuracy: float
    buckets: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {"type": "metrics", "epoch": self.epoch, "split": self.split, "mode": self.mode,
             "loss": round(self.loss, 10), "accuracy": round(self.accuracy, 10)}
        if self.buckets is not None:
            d["buckets"] = {k: (None if v is None else round(v, 10)) for k, v in self.buckets.items()}
        return d


@dataclass
class TrainResult:
    model: object
    records: list = field(default_factory=list)
    train_set: Optional[Dataset] = None
    test_set: Optional[Dataset] = None
    out_dir: Optional[Path] = None

    def final(self, split: str = "test", mode: str = "stripped") -> MetricsRecord:
        for r in reversed(self.records):
            if r.split == split and r.mode == mode:
                return r
        raise KeyError(f"no {split}/{mode} record")


def _correct(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=-1) == labels


def _ce(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    y = labels.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def predict(model, images: np.ndarray, mode: str = "stripped") -> np.ndarray:
    """Eval-mode logits for one batch under the requested evaluation mode."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            if mode == "stripped":
                return model(images).data
            out = model(images, minibatch_inference=True).data
            if getattr(model, "batchformer", None) is None or model.single_stream:
                return out
            return transformed_half(out)
    finally:
        model.train(was_training)


def evaluate(model, dataset: Dataset, mode: str = "stripped", batch_size: int = 16,
             bucket_map: Optional[dict] = None, epoch: int = -1, split: str = "test",
             eval_seed: int = 0) -> MetricsRecord:
    """Loss and top-1 accuracy (percent) of ``model`` on ``dataset``.

    ``stripped`` evaluates the model with every batch-attention module removed;
    ``minibatch_inference`` keeps them active and scores the transformed stream.
    Mini-batches for the latter are drawn from a fixed shuffle (stream "eval"
    of ``eval_seed``) so that, as in training, a batch mixes classes.
    """
    if mode == "stripped" and getattr(model, "batchformer", None) is not None:
        model = strip_for_export(model)
    if mode == "minibatch_inference":
        order = SeedStreams(eval_seed).get("eval").permutation(len(dataset))
    else:
        order = np.arange(len(dataset))
    logits = [predict(model, dataset.images[order[i:i + batch_size]], mode)
              for i in range(0, len(order), batch_size)]
    z = np.empty((len(dataset),) + logits[0].shape[1:], dtype=logits[0].dtype)
    z[order] = np.concatenate(logits, axis=0)
    correct = _correct(z, dataset.labels)
    buckets = None
    if bucket_map is not None and not dataset.dense:
        buckets = {}
        for name, classes in bucket_map.items():
            sel = np.isin(dataset.labels, classes)
            buckets[name] = float(100.0 * correct[sel].mean()) if sel.any() else None
    return MetricsRecord(epoch, split, mode, _ce(z, dataset.labels), float(100.0 * correct.mean()), buckets)


def evaluate_checkpoint(path, dataset: Dataset, mode: str = "stripped", batch_size: int = 16) -> MetricsRecord:
    from .checkpoint import load_checkpoint

    model, config, _ = load_checkpoint(path)
    with T.precision(config.precision):
        return evaluate(model, dataset, mode, batch_size)


def _header(config: RunConfig, streams: SeedStreams, train_set: Dataset, test_set: Dataset,
            model) -> dict:
    return {
        "type": "header",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "streams": streams.describe(),
        "train_size": len(train_set),
        "test_size": len(test_set),
        "train_class_counts": train_set.class_counts().tolist() if not train_set.dense else None,
        "parameters": model.num_parameters(),
        "batchformer_parameters": model.batchformer_parameter_count(),
    }


def train(config: RunConfig, out_dir=None) -> TrainResult:
    """Run one full training job; deterministic given ``config`` (seed included).

    With ``out_dir`` set, writes ``metrics.jsonl`` (byte-reproducible),
    ``timing.jsonl`` (wall clock), ``config.json`` and the ``final``,
    ``best`` and ``final_stripped`` checkpoints.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with T.precision(config.precision):
        return _train(config, out)


def _train(config: RunConfig, out: Optional[Path]) -> TrainResult:
    streams = SeedStreams(config.seed)
    train_set, test_set = load_datasets(config.data, config.seed)
    model = build_model(config.model_config(), config.batchformer_config(), streams,
                        single_stream=config.ablation.single_stream)
    o = config.optim
    groups = build_param_groups(model, o.weight_decay, config.batchformer.weight_decay)
    opt = Optimizer(groups, o.algorithm, o.betas, o.eps, o.momentum)
    bucket_map = None
    if not train_set.dense:
        head = config.data.long_tail_head
        bucket_map = bucket_classes(train_set.class_counts(), head)

    steps_per_epoch = len(train_set) // o.batch_size
    if steps_per_epoch == 0:
        raise T.DataError(f"training set of {len(train_set)} samples is smaller than one batch of {o.batch_size}")
    total = steps_per_epoch * o.epochs
    warmup = steps_per_epoch * o.warmup_epochs
    sampler = streams.get("sampler")

    records: list[MetricsRecord] = []
    metrics_fh = timing_fh = None
    if out is not None:
        (out / "config.json").write_text(config.to_json() + "\n")
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")
        metrics_fh.write(json.dumps(_header(config, streams, train_set, test_set, model), sort_keys=True) + "\n")

    def emit(rec: MetricsRecord) -> None:
        records.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    best_acc = -1.0
    step = 0
    try:
        for epoch in range(o.epochs):
            t0 = time.perf_counter()
            model.train()
            loss_sum, batches, correct, seen = 0.0, 0, 0, 0
            for images, labels in iterate_batches(train_set, o.batch_size, sampler, drop_last=True):
                lr = cosine_warmup_lr(step, total, warmup, o.lr) if o.cosine else o.lr
                opt.zero_grad()
                try:
                    logits = model(images)
                    loss = two_stream_loss(logits, labels, config.ablation.stream_weight)
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDiverged(epoch, step, exc.op) from exc
                opt.step(lr)
                step += 1
                z = logits.data
                if len(z) == 2 * len(labels):
                    z = original_half(z)
                loss_sum += loss.item()
                batches += 1
                correct += int(_correct(z, labels).sum())
                seen += labels.size
            train_rec = MetricsRecord(epoch, "train", "train", loss_sum / batches, 100.0 * correct / seen)
            emit(train_rec)
            test_rec = evaluate(model, test_set, "stripped", o.eval_batch_size, bucket_map, epoch)
            emit(test_rec)
            if config.ablation.minibatch_inference_eval and model.batchformer is not None:
                emit(evaluate(model, test_set, "minibatch_inference", o.eval_batch_size, bucket_map, epoch))
            if out is not None:
                if test_rec.accuracy > best_acc:
                    save_checkpoint(out / "best.ckpt", model, config)
                timing_fh.write(json.dumps({"epoch": epoch, "wall_time": time.perf_counter() - t0}) + "\n")
            best_acc = max(best_acc, test_rec.accuracy)
            logger.info("epoch %d: train loss %.4f, test acc %.2f", epoch, train_rec.loss, test_rec.accuracy)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    model.eval()
    if out is not None:
        save_checkpoint(out / "final.ckpt", model, config)
        save_checkpoint(out / "final_stripped.ckpt", strip_for_export(model), config)
    return TrainResult(model, records, train_set, test_set, out)
