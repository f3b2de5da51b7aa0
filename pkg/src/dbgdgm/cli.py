"""Command-line entry point: ``dbgdgm <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
Diagnostics go to stderr; data goes to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, EmbeddingDims, TrainingConfig
from .evaluate import (TASKS, Checkpoint, CMNPredictor, EvalError, ModelPredictor, community_report,
                       evaluate, export_embeddings)
from .generative import planted_corpus
from .graph import CorpusError, DynamicGraphCorpus, load_corpus, split_temporal, write_corpus
from .pipeline import PipelineConfig, PipelineError, prepare

log = logging.getLogger("dbgdgm")

CHECKPOINT_FILES = ("params.json", "params.bin", "config.json")

# flag name -> TrainingConfig field, for command-line overrides of the config file
TRAIN_OVERRIDES = {
    "K": "K",
    "lr": "learning_rate",
    "epochs": "max_epochs",
    "patience": "patience",
    "kl_warmup": "kl_warmup_epochs",
    "dim": None,
    "weight_decay": "weight_decay",
}


class UsageError(ValueError):
    """Bad arguments or inputs; maps to exit code 2."""


VALIDATION_ERRORS = (UsageError, ConfigError, CorpusError, EvalError, PipelineError)


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("DBGDGM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DBGDGM_SEED must be an integer, got {env!r}") from None


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_corpus(path: str) -> DynamicGraphCorpus:
    if not Path(path).is_dir():
        raise UsageError(f"data directory not found: {path}")
    return load_corpus(path)


def _load_checkpoint(path: str) -> Checkpoint:
    if not Path(path).is_dir():
        raise UsageError(f"checkpoint directory not found: {path}")
    return Checkpoint.load(path)


# subcommands -------------------------------------------------------------------


def cmd_prepare(args) -> None:
    if not Path(args.input).is_dir():
        raise UsageError(f"input directory not found: {args.input}")
    cfg = PipelineConfig(window=args.window, threshold_pct=args.threshold_pct)
    corpus, report = prepare(args.input, args.out, cfg, threads=args.threads)
    log.info("wrote corpus S=%d T=%d V=%d (m=%d edges per snapshot) to %s",
             corpus.S, corpus.T, corpus.V, report["m"], args.out)


def cmd_synth(args) -> None:
    for name in ("subjects", "nodes", "snapshots", "communities", "edges", "dim"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.communities > args.nodes:
        raise UsageError(f"cannot plant {args.communities} blocks on {args.nodes} nodes")
    if args.nodes < 2 or args.communities < 2:
        raise UsageError("need --nodes >= 2 and --communities >= 2")
    seed = resolve_seed(args.seed)
    dims = EmbeddingDims(args.dim, args.dim, args.dim)
    corpus, latents, _, blocks = planted_corpus(args.subjects, args.snapshots, args.nodes,
                                                args.communities, args.edges, seed, dims)
    out = Path(args.out)
    write_corpus(corpus, out)
    _write_json(out / "ground_truth.json", {
        "seed": seed,
        "config": {"S": args.subjects, "T": args.snapshots, "V": args.nodes, "K": args.communities,
                   "E_per_snapshot": args.edges, "H": args.dim},
        "blocks": [int(b) for b in blocks],
        # per subject, per snapshot: generated (source, target, community) triples
        "samples": [[np.column_stack([latents.samples[s][t], latents.z[s][t]]).tolist()
                     for t in range(args.snapshots)] for s in range(args.subjects)],
    })
    log.info("wrote planted corpus to %s", out)


def _train_config(args) -> TrainingConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = {}
    for flag, field_name in TRAIN_OVERRIDES.items():
        value = getattr(args, flag)
        if value is None:
            continue
        if field_name is None:  # --dim sets all three embedding sizes
            overrides.update(H_alpha=value, H_phi=value, H_psi=value)
        else:
            overrides[field_name] = value
    if args.seed is not None or "DBGDGM_SEED" in os.environ:
        overrides["seed"] = resolve_seed(args.seed)
    try:
        return TrainingConfig.from_file(args.config, **overrides)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def cmd_train(args) -> None:
    from .trainer import train

    cfg = _train_config(args)
    corpus = _load_corpus(args.data)
    out = Path(args.out)
    if any((out / f).exists() for f in CHECKPOINT_FILES) and not args.force:
        raise UsageError(f"{out} already holds a checkpoint; pass --force to overwrite")
    split_temporal(corpus, cfg.fractions)  # fail before training on an unsplittable corpus
    result = train(corpus, cfg, out_dir=out)
    log.info("trained %d epochs; best epoch %d with validation NLL %.5f",
             result.epochs_run, result.best_epoch, result.best_val_nll)


def _parse_tasks(text: str) -> list[str]:
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if not tasks or bad:
        raise UsageError(f"--tasks must be a comma list drawn from {','.join(TASKS)}; got {text!r}")
    return tasks


def cmd_eval(args) -> None:
    tasks = _parse_tasks(args.tasks)
    seed = resolve_seed(args.seed)
    corpus = _load_corpus(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    ckpt.check_corpus(corpus)
    split = split_temporal(corpus, ckpt.cfg.fractions)
    report = evaluate(ModelPredictor(ckpt.store, corpus.T), corpus, split.test,
                      [t for t in tasks if t != "communities"], seed)
    report["tasks"] = tasks
    report["model"] = "dbgdgm"
    if "communities" in tasks:
        report["communities"] = community_report(ckpt, corpus).to_dict()
    _write_json(Path(args.report), report)


def cmd_baseline_cmn(args) -> None:
    seed = resolve_seed(args.seed)
    corpus = _load_corpus(args.data)
    if args.snapshots == "all":
        times = range(1, corpus.T)
        if not times:
            raise UsageError("CMN needs at least two snapshots")
    else:
        times = split_temporal(corpus, TrainingConfig().fractions).test
    report = evaluate(CMNPredictor(corpus), corpus, times, ["recon", "link"], seed)
    report["model"] = "cmn"
    _write_json(Path(args.report), report)


def cmd_export(args) -> None:
    corpus = _load_corpus(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    ckpt.check_corpus(corpus)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    X = export_embeddings(ckpt, corpus, args.out)
    log.info("wrote %d x %d embedding matrix to %s", X.shape[0], X.shape[1], args.out)


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dbgdgm", description="Deep generative model of dynamic brain graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="timeseries -> thresholded correlation graphs")
    p.add_argument("--input", required=True, help="directory with subject_<s>.csv timeseries")
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--threshold-pct", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", parents=[common], help="sample a planted-community corpus")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--nodes", type=int, default=60)
    p.add_argument("--snapshots", type=int, default=16)
    p.add_argument("--communities", type=int, default=3)
    p.add_argument("--edges", type=int, default=180, help="directed samples drawn per snapshot")
    p.add_argument("--dim", type=int, default=8, help="embedding size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="fit the model to a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat JSON of TrainingConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.add_argument("--K", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--kl-warmup", dest="kl_warmup", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test snapshots")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", default=",".join(TASKS))
    p.add_argument("--seed", type=int)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline-cmn", parents=[common], help="score the common-neighbour baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--snapshots", choices=("test", "all"), default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_baseline_cmn)

    p = sub.add_parser("export", parents=[common], help="write per-subject embedding features")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("dbgdgm: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"dbgdgm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"dbgdgm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
