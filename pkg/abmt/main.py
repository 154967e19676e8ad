#!/usr/bin/env python3
"""
ABMT Main Entry Point

Command line surface of the toolkit::

    abmt synth    --out-dir data --seed 0
    abmt pretrain --source data/source.txt --target data/target.txt --seed 0 --out runs/pre
    abmt adapt    --target data/target.txt --checkpoint runs/pre/checkpoint.npz --seed 0 --out runs/abmt
    abmt eval     --checkpoint runs/abmt/checkpoint.npz --target data/target.txt
    abmt diagnose --report runs/abmt/report.json --out runs/abmt/divergence.csv --plot

Every TrainConfig field is also accepted as ``--<dotted.key> <value>``
(e.g. ``--cluster.min_pts 4``); values are parsed as YAML scalars.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .checkpoint import load_checkpoint
from .config import SynthConfig, TrainConfig, apply_overrides, iter_field_keys, load_config
from .data import read_dataset, synth_dataset, write_dataset
from .diagnostics import diagnose
from .exceptions import ABMTError
from .logging_config import setup_abmt_logging
from .trainer import MetricsReport, adapt_target, load_report, pretrain_source, run_eval, write_run_artifacts

logger = logging.getLogger("abmt.main")

_OVERRIDE_PREFIX = "override:"
_SYNTH_PREFIX = "synth:"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or flat 'key = value' config file")
    group = parser.add_argument_group("config overrides")
    for key, info in iter_field_keys(TrainConfig):
        group.add_argument(
            f"--{key}",
            dest=f"{_OVERRIDE_PREFIX}{key}",
            type=yaml.safe_load,
            default=argparse.SUPPRESS,
            metavar="VALUE",
            help=info.description,
        )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abmt", description="Asymmetric branched mean teaching toolkit")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-file", help="Also write logs to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write synthetic source/target dataset files")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--seed", type=int, required=True)
    for name, info in SynthConfig.model_fields.items():
        synth.add_argument(
            f"--{name.replace('_', '-')}",
            dest=f"{_SYNTH_PREFIX}{name}",
            type=type(info.default),
            default=argparse.SUPPRESS,
        )

    pretrain = sub.add_parser("pretrain", help="Supervised pre-training on the source domain")
    pretrain.add_argument("--source", required=True)
    pretrain.add_argument("--target", help="Evaluate direct transfer on this target")
    pretrain.add_argument("--seed", type=int, required=True)
    pretrain.add_argument("--out", required=True, help="Run directory")
    _add_config_flags(pretrain)

    adapt = sub.add_parser("adapt", help="Unsupervised adaptation to the target domain")
    adapt.add_argument("--target", required=True)
    adapt.add_argument("--source", help="Source data (re-ranking with source samples)")
    adapt.add_argument("--checkpoint", help="Pre-trained encoder; omit for fully unsupervised mode")
    adapt.add_argument("--seed", type=int, required=True)
    adapt.add_argument("--out", required=True, help="Run directory")
    _add_config_flags(adapt)

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on the target query/gallery splits")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--target", required=True)
    evaluate.add_argument("--out", help="Write the metrics JSON here")
    evaluate.add_argument("--ranks", type=int, nargs="+", default=[1, 5, 10])

    diag = sub.add_parser("diagnose", help="Divergence CSV (and plots) from a run report")
    diag.add_argument("--report", required=True)
    diag.add_argument("--out", required=True)
    diag.add_argument("--plot", action="store_true", help="Also write PNG plots (needs abmt[plot])")
    return parser


def _prefixed(args: argparse.Namespace, prefix: str) -> Dict[str, Any]:
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix)}


def _train_config(args: argparse.Namespace) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(base, _prefixed(args, _OVERRIDE_PREFIX))


def _cmd_synth(args: argparse.Namespace) -> None:
    synth = SynthConfig(**_prefixed(args, _SYNTH_PREFIX))
    source, target = synth_dataset(
        n_ids=synth.n_ids,
        imgs_per_id=synth.imgs_per_id,
        n_cams=synth.n_cams,
        parts=synth.parts,
        d_in=synth.d_in,
        domain_shift=synth.domain_shift,
        noise=synth.noise,
        seed=args.seed,
        part_scale=synth.part_scale,
        cam_scale=synth.cam_scale,
        clutter_scale=synth.clutter_scale,
    )
    out = Path(args.out_dir)
    write_dataset(source, out / "source.txt")
    write_dataset(target, out / "target.txt")


def _cmd_pretrain(args: argparse.Namespace) -> None:
    config = _train_config(args)
    source = read_dataset(args.source)
    trace: List[float] = []
    state = pretrain_source(config, source, args.seed, loss_trace=trace)
    report = MetricsReport(
        config=config.model_dump(mode="json"), seed=args.seed, mode="pretrain", pretrain_losses=trace
    )
    if args.target:
        target = read_dataset(args.target)
        report.final_metrics = run_eval(state, target, tuple(config.eval_ranks), config.eval_batch_size).model_dump()
    write_run_artifacts(args.out, state, report)


def _cmd_adapt(args: argparse.Namespace) -> None:
    config = _train_config(args)
    target = read_dataset(args.target)
    source = read_dataset(args.source) if args.source else None
    m_pre = load_checkpoint(args.checkpoint) if args.checkpoint else None
    teacher, report = adapt_target(config, m_pre, source, target, args.seed, run_dir=args.out)
    write_run_artifacts(args.out, teacher, report)


def _cmd_eval(args: argparse.Namespace) -> None:
    state = load_checkpoint(args.checkpoint, requires_grad=False)
    metrics = run_eval(state, read_dataset(args.target), tuple(args.ranks))
    text = metrics.model_dump_json(indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        logger.info(f"💾 Metrics written to {args.out}")
    else:
        print(text)


def _cmd_diagnose(args: argparse.Namespace) -> None:
    written = diagnose(load_report(args.report), args.out, plot=args.plot)
    logger.info(f"✅ Diagnostics written: {json.dumps({k: str(v) for k, v in written.items()})}")


COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    setup_abmt_logging(level=args.log_level, include_timestamp=False, log_file=args.log_file)
    try:
        COMMANDS[args.command](args)
    except (ABMTError, FileNotFoundError) as e:
        logger.error(f"❌ {args.command} failed: {type(e).__name__}: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
