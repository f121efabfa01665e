"""Command line front end.

Subcommands run the experiment stages; any stage failure exits with a
stage-tagged nonzero code so batch drivers can tell where a run died:

  3 config    4 synth/data    5 train    6 bank    7 score    8 eval    9 internal

The ablation flags map onto the component study: --no-contrastive (w_con=0),
--no-rd (w_rd=0), --distance-only (w_c=0, classifier skipped at score time),
--no-perturb (eta=0).
"""

from __future__ import annotations

import argparse
import sys

import torch

from . import config as config_mod
from . import pipeline
from .errors import ConfigError

STAGE_CODES = {"config": 3, "synth": 4, "train": 5, "bank": 6, "score": 7, "eval": 8}
INTERNAL_CODE = 9


class StageFailure(Exception):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {type(err).__name__}: {err}")
        self.code = STAGE_CODES.get(stage, INTERNAL_CODE)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as err:
        raise StageFailure("config", err) from err
    except Exception as err:
        raise StageFailure(name, err) from err


def _load_config(args) -> config_mod.ExperimentConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.default()
        seed = config_mod.resolve_seed(args.seed, cfg)
        over = {"seed": seed}
        if getattr(args, "threads", None) is not None:
            over["threads"] = args.threads
        if getattr(args, "no_contrastive", False):
            over["w_con"] = 0.0
        if getattr(args, "no_rd", False):
            over["w_rd"] = 0.0
        if getattr(args, "distance_only", False):
            over["w_c"] = 0.0
        if getattr(args, "no_perturb", False):
            over["eta"] = 0.0
        cfg = cfg.with_overrides(**over)
    except (ConfigError, OSError) as err:
        raise StageFailure("config", err) from err
    torch.set_num_threads(cfg.threads)
    return cfg


def _add_common(p, data=True):
    p.add_argument("--config", help="experiment config file (key=value sections)")
    p.add_argument("--seed", type=int, help="override the config and env seed")
    p.add_argument("--threads", type=int, help="torch thread count (1 = bitwise deterministic)")
    p.add_argument("--out", required=True, help="output directory")
    if data:
        p.add_argument("--data", required=True, help="dataset directory or manifest path")


def _add_train_flags(p):
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive loss term")
    p.add_argument("--no-rd", action="store_true", help="drop the feature redundancy loss term")


def _add_score_flags(p):
    p.add_argument("--distance-only", action="store_true",
                   help="distance branch only; skip the classifier")
    p.add_argument("--no-perturb", action="store_true",
                   help="classify unperturbed patches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zal3d",
                                     description="zero-shot 3D anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p, data=False)

    p = sub.add_parser("pseudo-preview", help="materialize sample training groups")
    _add_common(p)
    p.add_argument("--count", type=int, default=8, help="positive groups to export")

    p = sub.add_parser("train", help="train encoder and classifier")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("bank", help="build the coreset memory bank")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint from the train stage")

    p = sub.add_parser("score", help="score test samples")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint from the train stage")
    p.add_argument("--bank", required=True, help="memory bank from the bank stage")
    _add_score_flags(p)

    p = sub.add_parser("eval", help="compute metrics from stored scores")
    _add_common(p)
    p.add_argument("--scores", required=True, help="directory written by the score stage")

    p = sub.add_parser("zeroshot", help="train, bank, score, eval in one run")
    _add_common(p)
    _add_train_flags(p)
    _add_score_flags(p)

    return parser


def _run(args) -> None:
    cfg = _load_config(args)
    if args.command == "synth":
        _stage("synth", pipeline.cmd_synth, cfg, args.out)
    elif args.command == "pseudo-preview":
        _stage("synth", pipeline.cmd_pseudo_preview, cfg, args.data, args.out, args.count)
    elif args.command == "train":
        _stage("train", pipeline.cmd_train, cfg, args.data, args.out)
    elif args.command == "bank":
        _stage("bank", pipeline.cmd_bank, cfg, args.data, args.ckpt, args.out)
    elif args.command == "score":
        _stage("score", pipeline.cmd_score, cfg, args.data, args.ckpt, args.bank, args.out)
    elif args.command == "eval":
        _stage("eval", pipeline.cmd_eval, cfg, args.data, args.scores, args.out)
    elif args.command == "zeroshot":
        cache = {}
        ckpt = _stage("train", pipeline.cmd_train, cfg, args.data, args.out, cache)
        bank = _stage("bank", pipeline.cmd_bank, cfg, args.data, ckpt, args.out, cache)
        _stage("score", pipeline.cmd_score, cfg, args.data, ckpt, bank, args.out)
        _stage("eval", pipeline.cmd_eval, cfg, args.data, args.out, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except StageFailure as failure:
        print(failure, file=sys.stderr)
        return failure.code
    except Exception as err:  # pragma: no cover - report, never traceback-dump
        print(f"internal: {type(err).__name__}: {err}", file=sys.stderr)
        return INTERNAL_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
