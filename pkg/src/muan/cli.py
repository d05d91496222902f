"""Command-line entry point.

Verbs: ``train``, ``eval``, ``export-attn``, ``gen-data``.  Exit codes:
0 on success, 2 for configuration/input problems, 3 for numerical failures
(diverged training, degenerate attention rows).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import gen_grounding_dataset, gen_vqa_dataset, read_dataset, write_dataset
from .errors import DegenerateRowError, MuanError, TrainingDivergenceError
from .export import export_attention
from .train import ABLATIONS, RunConfig, evaluate, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muan", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True, help="path to the run config JSON")
    p_train.add_argument("--ablate", choices=ABLATIONS, default=None,
                         help="train with one architecture ablation")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the seed from the config")
    p_train.add_argument("--run-dir", default=None,
                         help="output directory (default: runs/<config name>)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--batch-size", type=int, default=64)
    p_eval.add_argument("--unrefined", action="store_true",
                        help="grounding: score the raw top proposal instead of the refined box")

    p_export = sub.add_parser("export-attn", help="dump attention maps for one sample")
    p_export.add_argument("--ckpt", required=True)
    p_export.add_argument("--data", required=True)
    p_export.add_argument("--sample", type=int, required=True,
                          help="index of the sample within --data")
    p_export.add_argument("--out", required=True)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p_gen.add_argument("--task", choices=("vqa", "grounding"), required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, required=True)
    return parser


def _cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    run_dir = args.run_dir or Path("runs") / Path(args.config).stem
    summary = train_run(config, run_dir, ablate=args.ablate, seed=args.seed)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    metrics = evaluate(model, samples, batch_size=args.batch_size,
                       refined=not args.unrefined)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _cmd_export(args) -> int:
    model = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    if not 0 <= args.sample < len(samples):
        raise MuanError(
            f"--sample {args.sample} out of range for {len(samples)} samples"
        )
    sidecar = export_attention(model, samples[args.sample], args.out)
    print(json.dumps({"out": str(args.out), "blocks": sidecar["blocks"],
                      "heads": sidecar["heads"]}, sort_keys=True))
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    if args.n <= 0:
        raise MuanError(f"--n must be positive, got {args.n}")
    gen = gen_vqa_dataset if args.task == "vqa" else gen_grounding_dataset
    samples = gen(args.n, args.seed)
    write_dataset(args.out, samples)
    print(json.dumps({"task": args.task, "n": len(samples), "out": str(args.out)},
                     sort_keys=True))
    return EXIT_OK


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval,
             "export-attn": _cmd_export, "gen-data": _cmd_gen_data}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (TrainingDivergenceError, DegenerateRowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MuanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
