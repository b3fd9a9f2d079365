"""Command-line entry point: ``mwpfix <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import gen_synthetic, load_math23k, load_shipped
from .expr import ExprError, Problem, answers_match, parse_text, to_text, try_evaluate
from .fixer import m_fix
from .metrics import ConfigError, evaluate, recheck_report, run_experiment
from .policy import Policy
from .tree_reg import MAX_ENUM_SIZE, SizePrior, SizeTooLarge, iter_trees

DEFAULT_CONFIG = Path(__file__).parent / "configs" / "default.yaml"


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()] if text.strip() else []


def _problem(quantities: list[float], answer: float = 0.0) -> Problem:
    n = len(quantities)
    return Problem("cli", tuple(f"q{i}" for i in range(n)), tuple(quantities), tuple(range(n)), answer)


def _load_corpus(name: str):
    if name in ("shipped", "synthetic200"):
        return load_shipped()
    return load_math23k(name)


def cmd_train(args) -> int:
    rows = run_experiment(args.config, args.out, args.seed)
    for r in rows:
        print(",".join(f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_eval(args) -> int:
    policy = Policy.load(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    problems = corpus.part(args.split) if corpus.split else corpus.problems
    report = evaluate(policy, problems, SizePrior.parse(args.prior), args.beam_width)
    text = json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for k, v in report.acc.items():
        print(f"acc@{k}\t{v:.4f}\tmean_rank_acc@{k}\t{report.acc_mean_rank[k]:.4f}")
    return 0


def cmd_fix(args) -> int:
    qs = _floats(args.quantities)
    problem = _problem(qs, args.answer)
    try:
        tree = parse_text(args.prefix)
    except ExprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    res = m_fix(tree, problem, m=args.m, rng=args.seed)
    if res is None:
        print("NONE")
        return 1
    print(to_text(res.tree))
    return 0


def cmd_enumerate(args) -> int:
    problem = _problem(_floats(args.quantities))
    try:
        if args.size > MAX_ENUM_SIZE:
            raise SizeTooLarge(f"enumeration limited to size {MAX_ENUM_SIZE}")
        for t in iter_trees(problem.vocab, args.size):
            v = try_evaluate(t, problem.quantities)
            mark = ""
            if args.target is not None and answers_match(v, args.target):
                mark = "\t*"
            print(f"{to_text(t)}\t{'ERR' if v is None else repr(v)}{mark}")
    except SizeTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_gen_synthetic(args) -> int:
    corpus = gen_synthetic(args.n, seed=args.seed, test_fraction=args.test_fraction)
    corpus.save(args.out)
    print(f"wrote {len(corpus)} problems to {args.out}")
    return 0


def cmd_report(args) -> int:
    report = json.loads(Path(args.report).read_text())
    issues = recheck_report(report)
    for key in ("acc_all_topk", "acc_mean_rank"):
        for k, v in report[key].items():
            print(f"{key}{k}\t{v:.4f}")
    for msg in issues:
        print(f"MISMATCH\t{msg}")
    print("consistent" if not issues else f"{len(issues)} inconsistencies")
    return 0 if not issues else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mwpfix", description=__doc__)
    ap.add_argument("--seed", type=int, default=None, help="override every random seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a YAML experiment config")
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="beam-evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--corpus", default="shipped", help="'shipped' or a Math23K-format file")
    p.add_argument("--split", default="test")
    p.add_argument("--prior", default="2,-1,2,3")
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fix", help="repair a prefix expression toward an answer")
    p.add_argument("prefix", help="e.g. '+ n0 * n1 n2'")
    p.add_argument("--quantities", required=True, help="comma-separated values for n0, n1, ...")
    p.add_argument("--answer", type=float, required=True)
    p.add_argument("--m", type=int, default=50, help="random-walk budget")
    p.set_defaults(func=cmd_fix)

    p = sub.add_parser("enumerate", help="list every tree of one size")
    p.add_argument("--quantities", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--target", type=float, default=None, help="mark trees hitting this value")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("report", help="recompute and check a report JSON")
    p.add_argument("report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("fix", "gen-synthetic") and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
