"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 config or usage error, 3 training
divergence, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .data import FUNDUS, MODALITIES, OCT, DatasetManifest, generate_synthetic, load_dataset, save_dataset, split_by_patient
from .errors import ConfigError, DataError, FDDMError, TrainingError
from .evaluation import evaluate
from .gradcheck import LOSS_ROWS, TOLERANCE, gradient_suite
from .model import load_checkpoint, save_checkpoint
from .training import run_ablation, train_student, train_teacher

log = logging.getLogger("fddm")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the message on stderr
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _summary_table(manifest: DatasetManifest) -> str:
    names = manifest.class_names
    rows = [("Category", *names, "Total")]
    eyes = manifest.class_counts(OCT, level="eye")
    n_eyes = len(manifest.eyes())
    rows.append(("Eyes", *map(str, eyes), str(n_eyes)))
    for label, mod in (("Fundus Images", FUNDUS), ("OCT Images", OCT)):
        counts = manifest.class_counts(mod)
        total = sum(1 for r in manifest.records if r.modality == mod)
        rows.append((label, *map(str, counts), str(total)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(" | ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _load_split(args, cfg: RunConfig):
    data = load_dataset(args.data)
    return split_by_patient(data, cfg.split.test_fraction, cfg.split.seed)


def _train_overrides(args, cfg: RunConfig) -> RunConfig:
    t = cfg.train
    over = {}
    for name in ("alpha", "beta", "tau", "epochs", "lr"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "seed", None) is not None:
        over["init_seed"] = over["data_seed"] = args.seed
    try:
        return replace(cfg, train=replace(t, **over))
    except FDDMError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args, cfg: RunConfig) -> Path:
    out = cfg.resolved_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_eval(title: str, report) -> None:
    agg = report.aggregates()
    cells = "  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in agg.items())
    print(f"{title}: {cells}")


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    gen = cfg.generator if args.seed is None else replace(cfg.generator, seed=args.seed)
    manifest = generate_synthetic(gen)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(manifest, out)
    print(f"wrote {len(manifest)} records to {out}")
    print(_summary_table(manifest))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _train_overrides(args, load_config(args.config))
    train, test = _load_split(args, cfg)
    res = train_teacher(train, cfg.train, eval_data=test.select(lambda r: r.modality == FUNDUS))
    out = _out_dir(args, cfg)
    save_checkpoint(out / "teacher.ckpt.json", res.params, res.state, extra={"role": "teacher"})
    res.log.save(out / "teacher.log.jsonl")
    _print_eval("teacher (fundus test split)", evaluate(res.params, test, FUNDUS))
    return EXIT_OK


def cmd_train_student(args) -> int:
    if not args.teacher:
        raise UsageError("train-student requires --teacher")
    cfg = _train_overrides(args, load_config(args.config))
    teacher, _, _ = load_checkpoint(args.teacher)
    train, test = _load_split(args, cfg)
    res = train_student(train, train, teacher, cfg.train, eval_data=test)
    out = _out_dir(args, cfg)
    save_checkpoint(out / "student.ckpt.json", res.params, res.state, extra={"role": "student"})
    res.log.save(out / "student.log.jsonl")
    for w in res.log.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _print_eval("student (OCT test split)", res.report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_overrides(args, load_config(args.config))
    train, test = _load_split(args, cfg)
    seeds = args.seeds or [cfg.train.init_seed]
    result = run_ablation(train, test, cfg.train, seeds)
    out = _out_dir(args, cfg)
    (out / "ablation.csv").write_text(result.table_csv(), encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(result.table_csv(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params, _, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if args.split != "all":
        train, test = split_by_patient(data, cfg.split.test_fraction, cfg.split.seed)
        data = test if args.split == "test" else train
    report = evaluate(params, data, args.modality)
    out = _out_dir(args, cfg)
    report.save(out / "report")
    _print_eval(f"eval ({args.modality}, {args.split})", report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = gradient_suite(seed=args.seed, instances=args.instances, corrupt=args.corrupt)
    failed = []
    print(f"{'loss':6s}  {'max rel. error':>14s}  result")
    for row, _, _ in LOSS_ROWS:
        ok = worst[row] < TOLERANCE
        if not ok:
            failed.append(row)
        print(f"{row:6s}  {worst[row]:14.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fddm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="dataset file to write (JSON lines)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", help="output directory (default: config output_dir, $FDDM_OUTPUT_DIR or .)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int, help="sets both init and data seeds")

    s = sub.add_parser("train-teacher", help="train the fundus teacher")
    train_flags(s)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="distill the teacher into an OCT student")
    train_flags(s)
    s.add_argument("--teacher", help="teacher checkpoint")
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("ablate", help="baseline / CSA-only / CPM-only / full comparison")
    train_flags(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--seeds", type=int, nargs="+")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="eye-level evaluation of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--modality", choices=MODALITIES, default=OCT)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--corrupt", choices=[r for r, _, _ in LOSS_ROWS], help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fddm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fddm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"fddm: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_IO
        print(f"fddm: error: {exc}", file=sys.stderr)
        return code
    except FDDMError as exc:
        print(f"fddm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"fddm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
