"""Command-line interface.

Subcommands:

    train-teacher   fit a cnn or inn classifier, write checkpoint + metrics
    distill         fit a student (any mode), teachers from checkpoints
    eval            accuracy report for a checkpoint on a dataset split
    kl-table        KL between student-token and teacher outputs, as CSV
    gradcheck       run the finite-difference suite, nonzero exit on failure
    inspect         list the tensors of a checkpoint or a config's model

Training commands write into --out: ``config.txt`` (the resolved config,
including computed normalization stats), ``metrics.csv`` (one row per
epoch), ``checkpoint.civt`` and ``run.log``.  Only run.log carries
timing; config, metrics and checkpoint bytes depend solely on the
config, so a rerun reproduces them exactly.

Deliberate failures print one line to stderr, ``error: <Type>: <what>``,
and exit with status 2.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from .config import RunConfig, apply_overrides, format_config, read_config
from .distill import kl_similarity
from .errors import CivtError, ConfigError
from .gradcheck import build_suite, run_cases
from .models import build
from .train import (
    collect_logits,
    evaluate_report,
    history_to_csv,
    order_teachers,
    prepare_data,
    train_run,
)


def _load_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _run_and_save(cfg: RunConfig, teachers: list) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "run.log")
    t0 = time.monotonic()
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def log(line: str) -> None:
            stamped = f"[{time.monotonic() - t0:9.2f}s] {line}"
            print(stamped)
            log_fh.write(stamped + "\n")
            log_fh.flush()

        log(f"training family={cfg.family} mode={cfg.mode} seed={cfg.seed} "
            f"dataset={cfg.dataset}")
        result = train_run(cfg, teachers=teachers, log=log)
        cfg.norm_mean = tuple(float(v) for v in result.norm_mean)
        cfg.norm_std = tuple(float(v) for v in result.norm_std)

        with open(os.path.join(cfg.out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(history_to_csv(result.history))
        with open(os.path.join(cfg.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_config(cfg))
        extras = {
            "__norm__/mean": result.norm_mean,
            "__norm__/std": result.norm_std,
        }
        ckpt.save_model(os.path.join(cfg.out_dir, "checkpoint.civt"),
                        result.model, extras)
        final = result.history[-1]
        log(f"done: test_acc {final['test_acc']:.4f}, artifacts in {cfg.out_dir}")


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    if cfg.family not in ("cnn", "inn"):
        raise ConfigError(
            f"train-teacher expects family cnn or inn, got '{cfg.family}'")
    cfg.mode = "none"
    _run_and_save(cfg, [])
    return 0


def _load_teachers(paths) -> list:
    teachers = []
    for path in paths or []:
        model, _ = ckpt.load_model(path)
        teachers.append(model)
    return teachers


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    if args.mode:
        cfg.mode = args.mode.replace("-", "_")
    if cfg.family not in ("civt", "transformer", "mixer"):
        raise ConfigError(
            f"distill expects family civt, transformer or mixer, got '{cfg.family}'")
    _run_and_save(cfg, _load_teachers(args.teacher))
    return 0


def _eval_data(cfg: RunConfig, split: str):
    if cfg.dataset == "synth":
        return datamod.synth_generate(cfg.synth_spec(split))
    return datamod.load_cifar10(cfg.data_dir, split)


def _norm_stats(extras: dict, cfg: RunConfig):
    if "__norm__/mean" in extras:
        return extras["__norm__/mean"], extras["__norm__/std"]
    if cfg.norm_mean:
        return (np.asarray(cfg.norm_mean, dtype=np.float32),
                np.asarray(cfg.norm_std, dtype=np.float32))
    raise ConfigError(
        "checkpoint has no normalization stats and the config sets none")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, extras = ckpt.load_model(args.checkpoint)
    if model.spec.classes != cfg.classes or model.spec.image_size != cfg.image_size:
        raise ConfigError(
            f"checkpoint ({model.spec.classes} classes, {model.spec.image_size}px) "
            f"does not match config ({cfg.classes} classes, {cfg.image_size}px)")
    mean, std = _norm_stats(extras, cfg)
    dataset = _eval_data(cfg, args.split)
    report = evaluate_report(model, dataset, mean, std)
    print(f"checkpoint {args.checkpoint}")
    print(f"family {model.spec.family}")
    print(f"split {args.split}")
    print(f"n {report['n']}")
    print(f"accuracy {report['accuracy']:.6f}")
    for c, (r, s) in enumerate(zip(report["per_class_recall"], report["support"])):
        print(f"class {c} recall {r:.6f} support {int(s)}")
    return 0


def cmd_kl_table(args) -> int:
    cfg = _load_config(args)
    student, extras = ckpt.load_model(args.student)
    teachers = _load_teachers(args.teacher)
    if not teachers:
        raise ConfigError("kl-table needs at least one --teacher checkpoint")
    mean, std = _norm_stats(extras, cfg)
    dataset = _eval_data(cfg, args.split)

    token_logits = collect_logits(student, dataset.images, mean, std)
    teacher_logits = {}
    for i, t in enumerate(teachers):
        name = f"teacher_{i}_{t.spec.family}"
        teacher_logits[name] = collect_logits(t, dataset.images, mean, std)["class"]

    lines = ["row,col,kl"]
    for tok_name, tok in token_logits.items():
        for t_name, t_log in teacher_logits.items():
            lines.append(f"token_{tok_name},{t_name},{kl_similarity(tok, t_log)!r}")
    for a_name, a_log in teacher_logits.items():
        for b_name, b_log in teacher_logits.items():
            lines.append(f"{a_name},{b_name},{kl_similarity(a_log, b_log)!r}")
    text = "\n".join(lines) + "\n"
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_cases(build_suite())
    failed = 0
    for r in reports:
        print(r.line())
        failed += 0 if r.passed else 1
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    if bool(args.checkpoint) == bool(args.config):
        raise ConfigError("inspect needs exactly one of --checkpoint or --config")
    if args.checkpoint:
        model, extras = ckpt.load_model(args.checkpoint)
        print(f"checkpoint {args.checkpoint}")
    else:
        cfg = read_config(args.config)
        if getattr(args, "set", None):
            apply_overrides(cfg, args.set)
        model = build(cfg.validate().model_spec(), seed=cfg.seed)
        extras = {}
        print(f"config {args.config}")
    spec = model.spec
    print(f"family {spec.family}")
    total = 0
    for name, p in model.named_parameters():
        shape = "x".join(str(e) for e in p.data.shape) or "scalar"
        print(f"param {name} {shape} {p.data.size}")
        total += p.data.size
    for name in sorted(extras):
        arr = extras[name]
        shape = "x".join(str(e) for e in arr.shape) or "scalar"
        print(f"extra {name} {shape}")
    print(f"total_params {total}")
    return 0


def _add_common(p: argparse.ArgumentParser, out_default: bool = False):
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the run seed")
    if out_default:
        p.add_argument("--out", help="output directory (overrides out_dir)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="civt",
        description="Cross-inductive-bias distillation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a cnn or inn classifier")
    _add_common(p, out_default=True)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student, optionally with teachers")
    p.add_argument("--mode", choices=("none", "single", "naive-multi", "cross-bias"),
                   help="distillation mode (overrides the config; dashes ok)")
    _add_common(p, out_default=True)
    p.add_argument("--teacher", action="append", metavar="CKPT",
                   help="teacher checkpoint (repeatable)")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("kl-table", help="token/teacher KL similarity CSV")
    _add_common(p)
    p.add_argument("--student", required=True, metavar="CKPT")
    p.add_argument("--teacher", action="append", metavar="CKPT")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out-csv", help="write the table here instead of stdout")
    p.set_defaults(fn=cmd_kl_table)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="list checkpoint or config tensors")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CivtError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
