"""Command-line entry point: ``batchformer {train,eval,ablate,gradcheck,attn-dump}``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or usage
error, 3 data / file-format error, 4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .. import tensor as T
from ..data import load_datasets
from ..seeds import SeedStreams
from ..tensor import ConfigError, DataError
from .config import RunConfig

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _load_config(args, default: Optional[RunConfig] = None) -> RunConfig:
    """``--config`` (or ``default``, or built-in defaults) with ``--seed`` and ``--set`` applied."""
    if args.config:
        config = RunConfig.load(args.config)
    else:
        config = default if default is not None else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.with_overrides(overrides) if overrides else config


def cmd_train(args) -> int:
    from .train import train

    config = _load_config(args)
    result = train(config, args.out)
    last = result.final("test", "stripped")
    print(f"final test accuracy (stripped): {last.accuracy:.2f}%")
    if config.ablation.minibatch_inference_eval and result.model.batchformer is not None:
        print(f"final test accuracy (mini-batch inference): "
              f"{result.final('test', 'minibatch_inference').accuracy:.2f}%")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    model, ckpt_config, _ = load_checkpoint(args.checkpoint)
    config = _load_config(args, ckpt_config)
    train_set, test_set = load_datasets(config.data, config.seed)
    dataset = train_set if args.split == "train" else test_set
    with T.precision(ckpt_config.precision):
        rec = evaluate(model, dataset, args.mode, args.batch_size or config.optim.eval_batch_size,
                       split=args.split)
    line = json.dumps(rec.to_dict(), sort_keys=True)
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.jsonl").write_text(line + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import ablate

    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    table, per_run = ablate(config, args.axis, seeds, args.out, jobs=args.jobs)
    print(table.read_text(), end="")
    print(f"per-run results: {per_run}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SCOPES, run_gradcheck

    scopes = SCOPES if args.scope in (None, "all") else (args.scope,)
    lines = []

    def report(res):
        lines.append(res.line())
        print(res.line(), flush=True)

    results = run_gradcheck(scopes, trials=args.trials, seed=args.seed or 0, on_result=report)
    failed = [r for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    print(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines + [summary]) + "\n")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_attn_dump(args) -> int:
    from .attn_dump import attn_dump
    from .checkpoint import load_checkpoint

    model, ckpt_config, _ = load_checkpoint(args.checkpoint)
    config = _load_config(args, ckpt_config)
    _, test_set = load_datasets(config.data, config.seed)
    if args.batch_size < 1 or args.batch_size > len(test_set):
        raise ConfigError(f"--batch-size must lie in [1, {len(test_set)}]")
    order = SeedStreams(config.seed).get("eval").permutation(len(test_set))[: args.batch_size]
    with T.precision(ckpt_config.precision):
        index = attn_dump(model, test_set.images[order], args.layer, args.out,
                          source_index=test_set.source_index[order])
    print(f"wrote {len(index['csv'])} CSV matrices and {len(index['pgm'])} PGM heatmaps to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="RunConfig JSON file (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set optim.lr=5e-4 (repeatable)")

    p = sub.add_parser("train", help="train one model and write metrics and checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("stripped", "minibatch_inference"), default="stripped")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a one-axis ablation grid and write CSV tables")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("insert_position", "batch_size", "shared", "two_stream",
                            "minibatch_inference", "batchformer"))
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, out_required=False)
    p.add_argument("--scope", choices=("ops", "blocks", "e2e", "all"), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-dump", help="export batch-attention maps of one insert layer")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint with batch attention (not stripped)")
    p.add_argument("--layer", type=int, default=0, help="0-based insert layer")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .train import TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
