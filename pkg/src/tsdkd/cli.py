"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 numerical check failed, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, parse_config
from .errors import InvalidInputError, InvalidParameterError, NonFiniteError

OUTPUT_ENV = "TSDKD_OUTPUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("tsdkd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args, cfg: TrainConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.out_dir if cfg else "runs")


def _config(args) -> TrainConfig:
    return parse_config(args.config, args.set or ())


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _record_dict(rec) -> dict:
    from dataclasses import asdict
    d = asdict(rec)
    d.pop("wall_clock", None)
    return d


# -- subcommands --------------------------------------------------------------

def cmd_pretrain_teacher(args) -> int:
    from .distill import pretrain_teacher
    from .lm import save_params

    cfg = _config(args)
    out = _out_dir(args, cfg)
    params, rec = pretrain_teacher(cfg)
    path = Path(cfg.teacher_path) if cfg.teacher_path else out / "teacher.ckpt"
    save_params(path, params)
    _dump(out / "teacher_record.json", _record_dict(rec))
    print(f"teacher saved to {path}; held-out exact match {rec.final_exact_match:.4f}")
    if rec.warning:
        print(f"warning: {rec.warning}", file=sys.stderr)
    return EXIT_OK


def _load_teacher(cfg: TrainConfig, args):
    from .lm import load_params
    path = args.teacher or cfg.teacher_path
    if not path:
        raise InvalidParameterError("teacher_path: a teacher checkpoint is required (--teacher)")
    return load_params(path)


def cmd_distill(args) -> int:
    from .distill import init_student, run_distillation
    from .lm import load_params

    cfg = _config(args)
    out = _out_dir(args, cfg)
    teacher = _load_teacher(cfg, args)
    if cfg.student_path:
        student = load_params(cfg.student_path)
    else:
        student, _ = init_student(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    _, rec = run_distillation(cfg, teacher, student, out_dir=out)
    _dump(out / "record.json", _record_dict(rec))
    print(f"{cfg.objective}: final exact match {rec.final_exact_match}, best {rec.best_exact_match}")
    print(f"metrics: {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .distill import task_splits
    from .harness import evaluate_exact_match, load_dataset
    from .lm import load_params

    cfg = _config(args)
    params = load_params(args.checkpoint)
    data = load_dataset(args.dataset) if args.dataset else task_splits(cfg)[1]
    em = evaluate_exact_match(params, data, max_len=cfg.max_len)
    print(json.dumps({"checkpoint": str(args.checkpoint), "n": len(data), "exact_match": em}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import gradcheck_suite

    rep = gradcheck_suite(args.trials, args.seed)
    print(rep.table())
    print(f"{rep.trials} traces, tolerance {rep.tolerance:g}: {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_prop1(args) -> int:
    from .checks import prop1_suite

    rep = prop1_suite(args.trials, args.seed)
    print(f"trials {rep.trials}  max deviation {rep.max_deviation:.3e}  "
          f"label mismatches {rep.label_mismatches}  {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_entropy_profile(args) -> int:
    from .distill import task_splits
    from .harness import entropy_profile
    from .lm import TaskCodec, load_params
    from .plots import plot_profile

    cfg = _config(args)
    out = _out_dir(args, cfg)
    params = load_params(args.checkpoint)
    codec = TaskCodec()
    prompts = [codec.encode_prompt(it.prompt) for it in task_splits(cfg)[1]]
    prof = entropy_profile(params, prompts, args.n, args.seed, cfg.temperature, cfg.max_len)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[i, float(m), int(c)] for i, (m, c) in enumerate(zip(prof.mean, prof.counts))]
    plot_profile(rows, out)
    early = prof.peak < 0.25 * prof.max_position
    print(f"peak position {prof.peak} of {prof.max_position}; "
          f"within first 25%: {'yes' if early else 'no'}")
    return EXIT_OK


def cmd_mode_demo(args) -> int:
    from .harness import bimodal_teacher, mode_fit_demo
    from .plots import plot_mode

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    teacher = bimodal_teacher(args.bins)
    summary = []
    for beta in args.beta:
        res = mode_fit_demo(teacher, beta, args.steps, args.seed)
        stem = f"mode_demo_beta{beta:g}"
        res.to_csv(out / f"{stem}.csv")
        rows = [[i, float(t), float(s)] for i, (t, s) in enumerate(zip(res.teacher, res.student))]
        plot_mode(rows, out, stem)
        summary.append(res.summary())
        masses = ", ".join(f"{m:.3f}" for m in res.mode_mass)
        print(f"beta={beta:g}  mode masses [{masses}]  mu={res.mu:.2f} sigma={res.sigma:.2f}")
    _dump(out / "mode_demo.json", summary)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import emit_plots

    for p in emit_plots(args.input, args.kind, args.out):
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsdkd", description="Token-selective dual distillation laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or out_dir)")
        return p

    p = with_config(sub.add_parser("pretrain-teacher", help="train the teacher with cross-entropy"))
    p.set_defaults(func=cmd_pretrain_teacher)

    p = with_config(sub.add_parser("distill", help="distil the student from a teacher checkpoint"))
    p.add_argument("--teacher", help="teacher checkpoint (overrides teacher_path)")
    p.set_defaults(func=cmd_distill)

    p = with_config(sub.add_parser("eval", help="greedy exact match of a checkpoint"))
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="JSONL dataset (default: the held-out split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("prop1-check", help="token-level vs sentence-level preference check")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prop1)

    p = with_config(sub.add_parser("entropy-profile", help="mean entropy by response position"))
    p.add_argument("checkpoint")
    p.add_argument("-n", type=int, default=500, help="number of sampled traces")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_entropy_profile)

    p = sub.add_parser("mode-demo", help="fit one bump to a two-mode teacher")
    p.add_argument("--beta", type=float, action="append", help="repeatable (default 0.001 and 0.999)")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or runs)")
    p.set_defaults(func=cmd_mode_demo)

    p = sub.add_parser("plot", help="render metrics / profile / mode CSV as SVG + CSV")
    p.add_argument("kind", choices=("metrics", "profile", "mode"))
    p.add_argument("input")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "mode-demo" and not args.beta:
            args.beta = [0.001, 0.999]
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (InvalidParameterError, InvalidInputError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
