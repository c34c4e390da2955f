"""Command-line entry point: ``jsynth <subcommand>`` or ``python -m jsynth``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import metrics, nets
from .data import (DataValidationError, Modality, VolumeFormatError, gaussian_normalize, generate_phantom,
                   read_dataset, read_volume, write_dataset, write_volume)
from .tensor import NonFiniteError
from .train import Regime, synthesize

log = logging.getLogger("jsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> X.ExperimentConfig:
    cfg = X.load_config(args.config) if args.config else X.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (args.seed,)
    if getattr(args, "out", None) is not None:
        cfg.out = Path(args.out)
    if getattr(args, "data", None) is not None:
        cfg.dataset = Path(args.data)
    if getattr(args, "regime", None) is not None:
        cfg.regimes = (Regime(args.regime),)
        cfg.baseline = Regime(args.regime).value
    if getattr(args, "folds", None) is not None:
        n = cfg.n_folds * cfg.n_test
        if args.folds < 1 or n % args.folds:
            raise X.ConfigError(f"--folds {args.folds} does not divide the cohort of {n} subjects")
        cfg.n_folds, cfg.n_test = args.folds, n // args.folds
    return cfg


def cmd_gen_phantom(args) -> int:
    cfg = X.load_config(args.config) if args.config else X.ExperimentConfig()
    spec = cfg.phantom if args.seed is None else replace(cfg.phantom, seed=args.seed)
    root = Path(args.out) if args.out else cfg.dataset
    subjects = generate_phantom(spec)
    try:
        write_dataset(subjects, root)
    except OSError as e:
        raise X.ConfigError(f"cannot write dataset to {root}: {e}") from e
    loads = [int(s.label.voxels.sum()) for s in subjects]
    print(f"wrote {len(subjects)} subjects to {root}: {spec.slices} slices of {spec.size[0]}x{spec.size[1]}, "
          f"lesion voxels per subject min {min(loads)} median {int(np.median(loads))} max {max(loads)}")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    root = Path(args.data) if args.data else (X.load_config(args.config).dataset if args.config else None)
    if root is None:
        raise UsageError("validate-data needs --data or --config")
    subjects = read_dataset(root)
    for s in subjects:
        for v in (s.t1, s.flair):
            if not np.isfinite(v.voxels).all():
                raise DataValidationError(f"subject {s.id}: non-finite voxels in {v.modality.value}")
    print(f"{root}: {len(subjects)} subjects valid, dims {subjects[0].t1.dims}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.regime is None:
        raise UsageError("train needs --regime")
    cfg = _config(args)
    cfg.validate()
    subjects, plans = X.prepare_run(cfg)
    seed = cfg.seeds[0]
    if not 0 <= args.fold < cfg.n_folds:
        raise X.ConfigError(f"--fold must lie in [0, {cfg.n_folds})")
    dest = X.run_task(cfg, subjects, plans[seed][args.fold], seed, cfg.regimes[0])
    rows = metrics.read_subject_csv(dest / "per_subject.csv")
    print(f"{cfg.regimes[0].value} seed {seed} fold {args.fold}: mean test DSC "
          f"{np.mean([r.dsc for r in rows]):.4f} -> {dest}")
    return EXIT_OK


def cmd_cross_validate(args) -> int:
    cfg = _config(args)
    rep = X.run_cross_validation(cfg)
    X.write_tables(rep, Path(cfg.out))
    print((Path(cfg.out) / "table1.txt").read_text(), end="")
    if (Path(cfg.out) / "table2.txt").exists():
        print((Path(cfg.out) / "table2.txt").read_text(), end="")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    if not (args.checkpoint and args.t1 and args.out):
        raise UsageError("synthesize needs --checkpoint, --t1 and --out")
    try:
        G = nets.load_checkpoint(args.checkpoint)
    except (OSError, nets.CheckpointError) as e:
        raise X.ConfigError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    if G.config.final_activation != nets.Activation.LEAKY_RELU:
        raise X.ConfigError(f"{args.checkpoint} is not a generator checkpoint")
    t1 = read_volume(args.t1, Modality.T1)
    if not args.no_normalize:
        t1 = gaussian_normalize(t1)
    out = synthesize(G, t1)
    write_volume(out, args.out)
    print(f"wrote {args.out} dims {out.dims}")
    if args.reference:
        ref = read_volume(args.reference, Modality.FLAIR)
        if ref.dims != out.dims:
            raise DataValidationError(f"reference dims {ref.dims} differ from output dims {out.dims}")
        if not args.no_normalize:
            ref = gaussian_normalize(ref)
        mask = t1.voxels != 0
        print(f"MAE {metrics.mae(ref, out, mask)!r} PSNR {metrics.psnr(ref, out, mask)!r}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.out:
        raise UsageError("report needs --out <results dir>")
    X.report(args.out)
    out = Path(args.out)
    print((out / "table1.txt").read_text(), end="")
    print((out / "table2.txt").read_text(), end="")
    print(f"overlays in {out / 'overlays'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite
    seeds = (args.seed,) if args.seed is not None else (0, 1, 2)
    results = run_suite(seeds, verbose=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-phantom": (cmd_gen_phantom, "write a synthetic cohort to disk"),
    "validate-data": (cmd_validate_data, "check a dataset directory"),
    "train": (cmd_train, "train one regime on one fold"),
    "cross-validate": (cmd_cross_validate, "train and score every regime on every fold and seed"),
    "synthesize": (cmd_synthesize, "generate a FLAIR volume from a T1 volume"),
    "report": (cmd_report, "tables and overlay panels from cross-validation outputs"),
    "grad-check": (cmd_grad_check, "finite-difference check of every differentiable op"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jsynth", description="Joint FLAIR synthesis and lesion segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value experiment config file")
        s.add_argument("--seed", type=int, help="override the seed (list)")
        s.add_argument("--out", help="output directory (or file for synthesize)")
        if name in ("train", "cross-validate", "validate-data", "gen-phantom"):
            s.add_argument("--data", help="dataset root (overrides the config)")
        if name in ("train", "cross-validate"):
            s.add_argument("--regime", choices=[r.value for r in Regime])
            s.add_argument("--folds", type=int, help="number of folds")
        if name == "train":
            s.add_argument("--fold", type=int, default=0, help="fold index to train")
        if name == "synthesize":
            s.add_argument("--checkpoint")
            s.add_argument("--t1")
            s.add_argument("--reference", help="real FLAIR volume; prints MAE and PSNR")
            s.add_argument("--no-normalize", action="store_true",
                           help="inputs are already z-scored; skip normalization")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"jsynth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "gen-phantom" and args.data and not args.out:
        args.out = args.data
    try:
        return COMMANDS[args.command][0](args)
    except (UsageError, X.ConfigError) as e:
        print(f"jsynth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, VolumeFormatError, X.IncompleteResultsError) as e:
        print(f"jsynth: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"jsynth: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"jsynth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
