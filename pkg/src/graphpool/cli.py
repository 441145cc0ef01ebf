"""Command-line surface over the pooling engine.

Exit codes: 0 success, 1 usage problems (bad flags, bad config keys),
2 everything else (corrupt files, numeric failures, missing data).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import classical, evaluate, model as mdl, trainer
from .dataio import load_manifest, load_trials, read_feature_stack
from .diffcore import no_tape
from .errors import GraphPoolError, UsageError
from .model import ModelConfig
from .trainer import TrainConfig, load_checkpoint


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting so we own the exit code."""

    def error(self, message):
        raise UsageError(message)


def _coerce_field(field: dataclasses.Field, value):
    if value is None:
        return None
    if field.type in ("int", int):
        return int(value)
    if field.type in ("float", float):
        return float(value)
    if field.type in ("bool", bool):
        if not isinstance(value, bool):
            raise UsageError(f"config key {field.name!r} must be true/false")
        return value
    if field.type in ("int | None",):
        return int(value)
    return value


def load_config_file(path: str) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat JSON object holding model and training settings;
    unknown keys are rejected rather than ignored."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kwargs, train_kwargs = {}, {}
    for key, value in raw.items():
        if key in model_fields:
            model_kwargs[key] = _coerce_field(model_fields[key], value)
        elif key in train_fields:
            train_kwargs[key] = _coerce_field(train_fields[key], value)
        else:
            known = sorted(set(model_fields) | set(train_fields))
            raise UsageError(
                f"unknown config key {key!r}; known keys: {', '.join(known)}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def build_parser() -> _Parser:
    parser = _Parser(prog="graphpool",
                     description="Graph pooling engine for speaker embeddings.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_train = sub.add_parser("train", help="train the pooling model")
    p_train.add_argument("--manifest", required=True, help="JSONL training manifest")
    p_train.add_argument("--config", required=True, help="flat JSON config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--dtype", choices=["f32", "f64"], default="f64",
                         help="parameter precision for a fresh run")
    p_train.add_argument("--quiet", action="store_true", help="suppress step logs")

    p_eval = sub.add_parser("evaluate", help="score trials and report EER")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--trials", required=True,
                        help="'<0|1> <enroll> <test>' lines")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--workers", type=int, default=0,
                        help="embedding threads (0 = sequential)")

    p_pool = sub.add_parser("pool", help="pool one feature file to a vector")
    p_pool.add_argument("--features", required=True, help="feature stack file")
    p_pool.add_argument("--kind", required=True,
                        choices=sorted(classical.POOLING_KINDS) + ["gnn"])
    p_pool.add_argument("--seed", type=int, default=None,
                        help="required for --kind random")
    p_pool.add_argument("--checkpoint", default=None,
                        help="required for --kind gnn")
    p_pool.add_argument("--out", required=True, help="output CSV (one value per line)")

    p_adj = sub.add_parser("inspect-adjacency",
                           help="dump the attention adjacency for one utterance")
    p_adj.add_argument("--features", required=True)
    p_adj.add_argument("--checkpoint", required=True)
    p_adj.add_argument("--out", required=True, help="output CSV (N header cols, N rows)")

    p_w = sub.add_parser("inspect-weights",
                         help="dump normalized hidden-feature layer weights")
    p_w.add_argument("--checkpoint", required=True)
    p_w.add_argument("--out", default=None, help="output CSV (default stdout)")
    return parser


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    model_config, train_config = load_config_file(args.config)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = trainer.train(manifest, model_config, train_config, args.out,
                           resume_from=args.resume, dtype=dtype, log=log)
    print(f"checkpoint={result.final_checkpoint}")
    print(f"metrics={result.metrics_path}")
    print(f"steps={result.steps}")
    return 0


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    trials = load_trials(args.trials, manifest)
    ckpt = load_checkpoint(args.checkpoint)
    embeddings = evaluate.embed_all(manifest, ckpt.params, ckpt.model_config,
                                    workers=args.workers)
    scored = evaluate.score_trials(trials, embeddings)
    result = evaluate.compute_eer(scored)
    print(f"eer={result.eer:.6f}")
    print(f"threshold={result.threshold:.6f}")
    return 0


def _write_column(path: str, vector: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(vector).ravel():
            fh.write(f"{v:.10g}\n")


def _cmd_pool(args) -> int:
    stack = read_feature_stack(args.features)
    if args.kind == "gnn":
        if args.checkpoint is None:
            raise UsageError("--kind gnn requires --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        vector = evaluate.embed_utterance(args.features, ckpt.params,
                                          ckpt.model_config)
    else:
        # Classical kinds act on a single layer; multi-layer stacks use
        # the last (topmost) hidden-feature layer.
        frames = stack.values[-1]  # N x F
        features = np.asarray(frames, dtype=np.float64).T  # F x N
        vector = classical.pool(args.kind, features, seed=args.seed)
    _write_column(args.out, vector)
    print(f"wrote {np.asarray(vector).size} values to {args.out}")
    return 0


def _cmd_inspect_adjacency(args) -> int:
    stack = read_feature_stack(args.features)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    with no_tape():
        from . import attention as att
        from .diffcore import constant
        if cfg.use_layer_weighting:
            layers = [constant(stack.values[i].astype(np.float64))
                      for i in range(stack.layers)]
            features = mdl.weight_layers(layers, ckpt.params.layer_weights)
        else:
            features = constant(stack.values[0].astype(np.float64))
        adjacency = att.attend(features, ckpt.params.attention)
    matrix = adjacency.matrix.data
    n = matrix.shape[0]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"frame_{j}" for j in range(n)) + "\n")
        for row in matrix:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    print(f"wrote {n}x{n} adjacency to {args.out}")
    return 0


def _cmd_inspect_weights(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    weights = ckpt.params.layer_weights
    if not weights:
        raise UsageError("checkpoint model has no hidden-feature layer weights")
    raw = np.array([w.data[0, 0] for w in weights])
    normalized = raw / raw.sum()
    lines = ["layer,weight"]
    lines += [f"{i},{v:.10g}" for i, v in enumerate(normalized)]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {len(weights)} weights to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "pool": _cmd_pool,
    "inspect-adjacency": _cmd_inspect_adjacency,
    "inspect-weights": _cmd_inspect_weights,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse --help exits; keep its code
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help()
            return 1
        return _COMMANDS[args.command](args)
    except GraphPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
