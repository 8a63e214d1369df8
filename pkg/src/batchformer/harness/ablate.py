"""One-axis ablation grids over fixed seeds, reported as CSV tables."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..tensor import ConfigError
from .config import RunConfig
from .train import train

logger = logging.getLogger(__name__)

AXES = ("insert_position", "batch_size", "shared", "two_stream", "minibatch_inference", "batchformer")
BUCKETS = ("many", "med", "few")


@dataclass
class Setting:
    label: str
    overrides: dict
    mode: str = "stripped"


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        out[k] = _merge(base.get(k, {}), v) if isinstance(v, dict) else v
    return out


def settings_for(config: RunConfig, axis: str) -> list[Setting]:
    depth = config.model.depth
    every = list(range(depth))
    on = {"batchformer": {"enabled": True}}
    if axis == "insert_position":
        rows = [Setting(f"L{i + 1}", _merge(on, {"batchformer": {"insert_positions": [i]}})) for i in every]
        rows.append(Setting("all", _merge(on, {"batchformer": {"insert_positions": every}})))
        return rows
    if axis == "batch_size":
        return [Setting(f"B={b}", _merge(on, {"optim": {"batch_size": b}})) for b in (8, 16, 32)]
    if axis == "shared":
        grid = {"batchformer": {"enabled": True, "insert_positions": every}}
        return [Setting("non-shared", _merge(grid, {"batchformer": {"shared": False}})),
                Setting("shared", _merge(grid, {"batchformer": {"shared": True}}))]
    if axis == "two_stream":
        return [Setting("two-stream", _merge(on, {"ablation": {"single_stream": False}})),
                Setting("single-stream", _merge(on, {"ablation": {"single_stream": True}}))]
    if axis == "minibatch_inference":
        run = _merge(on, {"ablation": {"minibatch_inference_eval": True}})
        return [Setting("stripped", run, "stripped"),
                Setting("minibatch-inference", run, "minibatch_inference")]
    if axis == "batchformer":
        return [Setting("baseline", {"batchformer": {"enabled": False}}), Setting("batchformer", on)]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def _run_one(payload: tuple[dict, Optional[str]]) -> list[dict]:
    cfg_dict, out_dir = payload
    config = RunConfig.from_dict(cfg_dict)
    result = train(config, out_dir)
    rows = []
    modes = {r.mode for r in result.records if r.split == "test"}
    for mode in sorted(modes):
        rec = result.final("test", mode)
        row = {"mode": mode, "seed": config.seed, "accuracy": rec.accuracy, "loss": rec.loss,
               "bf_parameters": result.model.batchformer_parameter_count()}
        for b in BUCKETS:
            row[b] = (rec.buckets or {}).get(b)
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def ablate(config: RunConfig, axis: str, seeds: Sequence[int], out_dir,
           jobs: int = 1) -> tuple[Path, Path]:
    """Train every (setting, seed) pair and write ``ablation_<axis>.csv``.

    The summary table has one row per setting (median over seeds); the
    companion ``ablation_<axis>_runs.csv`` has one row per run. Each run
    keeps its own output directory, so ``jobs > 1`` runs them in parallel
    processes without sharing files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = settings_for(config, axis)
    base = config.to_dict()

    def cfg_for(s: Setting, seed: int) -> RunConfig:
        return RunConfig.from_dict(_merge(base, _merge(s.overrides, {"seed": int(seed)})))

    # settings that share a training run (minibatch_inference) are trained once
    runs: dict[str, tuple[dict, str]] = {}
    for s in settings:
        for seed in seeds:
            cfg = cfg_for(s, seed)
            key = cfg.config_hash()
            if key not in runs:
                runs[key] = (cfg.to_dict(), str(out / "runs" / f"{len(runs):03d}_{s.label}_seed{seed}"))
    keys = list(runs)
    payloads = [runs[k] for k in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, payloads))
    else:
        results = [_run_one(p) for p in payloads]
    by_key = dict(zip(keys, results))

    run_rows = []
    summary = []
    for s in settings:
        accs, buckets = [], {b: [] for b in BUCKETS}
        bf_params = 0
        for seed in seeds:
            rows = [r for r in by_key[cfg_for(s, seed).config_hash()] if r["mode"] == s.mode]
            if not rows:
                raise ConfigError(f"setting {s.label} produced no {s.mode} evaluation")
            r = rows[0]
            run_rows.append({"setting": s.label, **r})
            accs.append(r["accuracy"])
            bf_params = r["bf_parameters"]
            for b in BUCKETS:
                if r[b] is not None:
                    buckets[b].append(r[b])
        summary.append({
            "axis": axis, "setting": s.label, "eval_mode": s.mode, "seeds": len(accs),
            "accuracy_median": float(np.median(accs)), "accuracy_mean": float(np.mean(accs)),
            "accuracy_min": float(np.min(accs)), "accuracy_max": float(np.max(accs)),
            **{f"{b}_median": (float(np.median(v)) if v else None) for b, v in buckets.items()},
            "bf_parameters": bf_params,
        })
        logger.info("%s=%s: median accuracy %.2f over %d seeds", axis, s.label,
                    summary[-1]["accuracy_median"], len(accs))

    table = out / f"ablation_{axis}.csv"
    per_run = out / f"ablation_{axis}_runs.csv"
    _write_csv(table, summary)
    _write_csv(per_run, run_rows)
    return table, per_run


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
