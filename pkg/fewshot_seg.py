#!/usr/bin/env python3
"""
Few-Shot Segmentation Harness
Train, evaluate, gradient-check and inspect the dual-path large-kernel
attention prototype segmenter on synthetic abdominal-style scenes.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from checkpoint import CheckpointError
from config import ConfigError, RunConfig
from episodes import (EpisodeSampler, MissingClassError, UnknownEpisodeError, mask_to_uint8, to_uint8,
                      write_manifest, write_pgm)
from fusion_metrics import binarize
from gradcheck import run_gradcheck
from tensor_core import NonFiniteError
from trainer import (ALPHA_SWEEP, ModelBackend, Trainer, TrainingDiverged, evaluate, model_from_checkpoint,
                     run_ablation, select_variants, sweep_alpha, sweep_table)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class UsageError(Exception):
    """Bad command-line usage"""


class HarnessParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _name_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    parser = HarnessParser(prog="fewshot_seg", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=HarnessParser)

    train = commands.add_parser("train", help="episodic training from a JSON config")
    train.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    train.add_argument("--out", help="output directory (overrides config.out_dir)")
    train.add_argument("--quiet", action="store_true", help="no progress bar")
    train.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint (step, weights, momentum)")
    train.add_argument("--steps", type=int, help="override the total step count")

    evaluate_cmd = commands.add_parser("eval", help="per-class Dice over seeded repetitions")
    evaluate_cmd.add_argument("--ckpt", required=True)
    evaluate_cmd.add_argument("--split", choices=("setting1", "setting2"))
    evaluate_cmd.add_argument("--repeats", type=int, default=3)
    evaluate_cmd.add_argument("--alpha", type=float, help="fusion factor override")
    evaluate_cmd.add_argument("--classes", help="comma-separated class subset")
    evaluate_cmd.add_argument("--json", help="write the report here as JSON")

    commands.add_parser("gradcheck", help="finite-difference check of every differentiable op") \
        .add_argument("--instances", type=int, default=20)

    dump = commands.add_parser("dump-masks", help="write query/truth/predicted masks as PGM")
    dump.add_argument("--ckpt", required=True)
    dump.add_argument("--episodes", required=True, help="comma-separated episode ids")
    dump.add_argument("--out", default="masks")

    sweep = commands.add_parser("sweep-alpha", help="evaluate one checkpoint under several fusion factors")
    sweep.add_argument("--ckpt", required=True)
    sweep.add_argument("--alphas", type=_float_list, default=list(ALPHA_SWEEP))
    sweep.add_argument("--repeats", type=int, default=3)
    sweep.add_argument("--json", help="write the sweep here as JSON")

    ablate = commands.add_parser("ablate", help="single-path, dual-path and attention training runs")
    ablate.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    ablate.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    ablate.add_argument("--out", default="runs/ablation")
    ablate.add_argument("--variants", type=_name_list,
                        help="subset of 32-only,64-only,dual,dual+attention (default: all)")
    ablate.add_argument("--kernels", type=_int_list, default=[3], help="attention kernel sizes, e.g. 3,5")
    ablate.add_argument("--quiet", action="store_true")
    return parser


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig().validate()


def cmd_train(args):
    if args.resume:
        if args.config:
            raise UsageError("--resume takes its config from the checkpoint; drop --config")
        trainer = Trainer.resume(args.resume, out_dir=args.out, steps=args.steps, show_progress=not args.quiet)
        print(f"🔁 Resuming at step {trainer.step} of {trainer.config.steps} -> {trainer.out_dir}")
    else:
        config = _load_config(args.config)
        if args.out:
            config = config.replace(out_dir=args.out)
        if args.steps is not None:
            config = config.replace(steps=args.steps)
        print(f"🚀 Training {config.steps} steps -> {config.out_dir}")
        trainer = Trainer(config, show_progress=not args.quiet)
    path = trainer.train()
    print(f"💾 Checkpoint saved as: {path}")
    print(f"📈 Metrics log: {trainer.metrics_path}")
    return EXIT_OK


def cmd_eval(args):
    model, ckpt = model_from_checkpoint(args.ckpt)
    config = ckpt.config
    if args.split:
        config = config.replace(split_mode=args.split)
    if args.alpha is not None:
        model = model.with_alpha(args.alpha)
    classes = args.classes.split(",") if args.classes else None
    sampler = EpisodeSampler.from_config(config)
    report = evaluate(ModelBackend(model), sampler, repeats=args.repeats, classes=classes,
                      split_mode=config.split_mode, alpha=model.fusion.alpha)
    print(report.table())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, indent=2, sort_keys=True)
        print(f"📝 Report written to {args.json}")
    return EXIT_OK


def cmd_gradcheck(args):
    report = run_gradcheck(instances=args.instances)
    print(report.table())
    if not report.passed:
        print("❌ Gradient check failed")
        return EXIT_NUMERIC
    print("✅ All gradient checks passed")
    return EXIT_OK


def dump_masks(model, sampler, episode_ids, out_dir):
    """Support and query PGMs per episode plus a manifest; returns the written paths"""
    os.makedirs(out_dir, exist_ok=True)
    written, manifest = [], []
    for episode_id in episode_ids:
        episode = sampler.episode_by_id(episode_id)
        prediction = model.predict(episode)
        images = {
            "support": to_uint8(episode.support_image),
            "support_mask": mask_to_uint8(episode.support_mask),
            "query": to_uint8(episode.query_image),
            "truth": mask_to_uint8(episode.query_mask),
            "fused": mask_to_uint8(binarize(prediction.fused.fg)),
        }
        for path_name, path_prediction in prediction.paths.items():
            images[f"path{path_name}"] = mask_to_uint8(binarize(path_prediction.fg))
        for name, pixels in images.items():
            path = os.path.join(out_dir, f"{episode_id}_{name}.pgm")
            write_pgm(path, pixels)
            written.append(path)
        manifest.append({
            "episode_id": episode_id,
            "class": episode.class_id,
            "support_path": os.path.join(out_dir, f"{episode_id}_support.pgm"),
            "query_path": os.path.join(out_dir, f"{episode_id}_query.pgm"),
            "mode": episode.mode,
            "seed": episode.seed,
        })
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), manifest)
    return written


def cmd_dump_masks(args):
    model, ckpt = model_from_checkpoint(args.ckpt)
    sampler = EpisodeSampler.from_config(ckpt.config)
    ids = [e.strip() for e in args.episodes.split(",") if e.strip()]
    written = dump_masks(model, sampler, ids, args.out)
    print(f"🖼️ Wrote {len(written)} PGM files to {args.out}")
    return EXIT_OK


def cmd_sweep_alpha(args):
    model, ckpt = model_from_checkpoint(args.ckpt)
    sampler = EpisodeSampler.from_config(ckpt.config)
    reports = sweep_alpha(model, sampler, alphas=args.alphas, repeats=args.repeats)
    print(sweep_table(reports))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as handle:
            json.dump({str(a): r.to_dict() for a, r in reports.items()}, handle, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_ablate(args):
    config = _load_config(args.config)
    try:
        select_variants(args.variants, args.kernels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = run_ablation(config, args.seeds, args.out, variants=args.variants,
                           kernel_sizes=args.kernels, show_progress=not args.quiet)
    names = list(results)
    width = max(12, *(len(n) + 2 for n in names))
    print(f"  {'seed':>6}" + "".join(f"{n:>{width}}" for n in names))
    for seed in args.seeds:
        print(f"  {seed:>6}" + "".join(f"{results[n][seed]:>{width}.2f}" for n in names))
    means = {n: float(np.mean(list(v.values()))) for n, v in results.items()}
    print(f"  {'mean':>6}" + "".join(f"{means[n]:>{width}.2f}" for n in names))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-masks": cmd_dump_masks,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate": cmd_ablate,
}


def main(argv=None):
    """Parse arguments, dispatch, and map failures onto exit codes"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MissingClassError, UnknownEpisodeError, UsageError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingDiverged) as exc:
        print(f"Numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
