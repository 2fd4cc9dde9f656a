"""Command line entry point: ``phiaqa <subcommand> ...``.

Results go to stdout and progress logs to stderr, both as ``key=value``
lines. Errors exit with the code attached to their exception class.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from .errors import ConfigError, PhiError
from .synthdata import SyntheticConfig, generate_dataset, load_dataset

IO_EXIT = 8
FULL_DIMS = {"D": 1024, "M": 68}

TRAIN_FLAGS = ("no_gmf", "no_tesa", "no_lcr", "no_kl", "half", "freeze_tete")


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file overriding the defaults")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int, help="epochs per stage")
    p.add_argument("--epochs2", type=int, help="stage-2 epochs if different from --epochs")
    p.add_argument("--steps", type=int, help="flow steps P")
    p.add_argument("--seed", type=int)
    for flag in TRAIN_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), action="store_true", default=None, dest=flag)


def _train_config(args):
    from .pipeline import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for name in ("batch", "epochs", "steps", "seed") + TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "strategy", None) in ("two-stage", "one-stage"):
        overrides["strategy"] = args.strategy
    return TrainConfig.from_mapping(overrides, cfg)


def _epochs(args, cfg):
    return cfg.epochs, args.epochs2 if args.epochs2 is not None else cfg.epochs


def _print(**values) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in values.items()), flush=True)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _print_report(report, **tags) -> None:
    _print(**tags, srcc=report.mean_srcc, rl2=report.mean_rl2,
           **{k: v for k, v in report.extras.items()})


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    values = dict(FULL_DIMS) if args.full_dims else {}
    values.update({f.name: getattr(args, f.name) for f in fields(SyntheticConfig)
                   if getattr(args, f.name, None) is not None})
    cfg = SyntheticConfig.from_mapping(values)
    train_path, test_path, manifest = generate_dataset(cfg, args.out)
    _print(train=train_path, test=test_path, n_train=cfg.n_train, n_test=cfg.n_test,
           M=manifest.M, D=manifest.D)
    return 0


def cmd_train(args) -> int:
    from .pipeline import Dataset, compare_strategies, evaluate, save_checkpoint, train

    cfg = _train_config(args)
    train_samples, _ = load_dataset(args.train)
    e1, e2 = _epochs(args, cfg)
    if args.strategy == "both":
        if not args.test:
            raise ConfigError("--strategy both needs --test to compare the arms")
        test_samples, manifest = load_dataset(args.test)
        for name, report in compare_strategies(train_samples, test_samples, cfg, e1, e2, manifest).items():
            _print_report(report, strategy=name)
        return 0
    result = train(Dataset.from_samples(train_samples), cfg, e1, e2)
    if args.out:
        save_checkpoint(result.checkpoint, args.out)
    _print(stage=result.checkpoint.stage, epochs=result.checkpoint.epoch,
           fingerprint=result.checkpoint.fingerprint, checkpoint=args.out or "-")
    if args.test:
        test_samples, manifest = load_dataset(args.test)
        _print_report(evaluate(result.checkpoint, test_samples, manifest), split="test")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint, force=args.force)
    samples, manifest = load_dataset(args.data)
    report = evaluate(ckpt, samples, manifest)
    _print_report(report, stage=ckpt.stage)
    return 0


def _parse_steps(text: str) -> tuple[int, ...]:
    try:
        steps = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad step list {text!r}") from None
    if not steps or min(steps) < 1:
        raise ConfigError("step list must hold positive integers")
    return steps


def cmd_ablate(args) -> int:
    from .pipeline import ABLATIONS, run_ablation

    cfg = _train_config(args)
    train_samples, _ = load_dataset(args.train)
    test_samples, manifest = load_dataset(args.test)
    e1, e2 = _epochs(args, cfg)
    rows = run_ablation(train_samples, test_samples, cfg, _parse_steps(args.step_values), ABLATIONS,
                        e1, e2, manifest)
    for name, report in rows:
        _print(arm=name, srcc=report.mean_srcc, rl2=report.mean_rl2)
    return 0


def cmd_sweep_steps(args) -> int:
    from .pipeline import run_ablation

    cfg = _train_config(args)
    train_samples, _ = load_dataset(args.train)
    test_samples, manifest = load_dataset(args.test)
    e1, e2 = _epochs(args, cfg)
    rows = run_ablation(train_samples, test_samples, cfg, _parse_steps(args.step_values), (), e1, e2,
                        manifest)
    for name, report in rows:
        _print(steps=name.split("=", 1)[1], srcc=report.mean_srcc, rl2=report.mean_rl2)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phiaqa", description="Long-term action quality assessment "
                                     "on clip-feature sequences.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch logs")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic train/test pair")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--full-dims", action="store_true", help="D=1024 features over M=68 clips")
    for f in fields(SyntheticConfig):
        kind = float if f.type in ("float", float) else int
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (and optionally evaluate it)")
    t.add_argument("--train", required=True, help="training .phif file")
    t.add_argument("--test", help="held-out .phif file to evaluate after training")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--strategy", choices=("two-stage", "one-stage", "both"), default=None)
    _add_train_options(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--force", action="store_true", help="accept a config fingerprint mismatch")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "ablation arms plus the flow-step sweep"),
                                 ("sweep-steps", cmd_sweep_steps, "flow-step sweep only")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--train", required=True)
        a.add_argument("--test", required=True)
        a.add_argument("--step-values", default="1,2,4,8", help="comma-separated P values")
        _add_train_options(a)
        a.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except PhiError as exc:
        print(f"error={type(exc).__name__} message={exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error={type(exc).__name__} message={exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
