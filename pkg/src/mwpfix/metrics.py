"""Beam evaluation, Acc@k, and the config-driven experiment runner."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .data import Corpus, gen_synthetic, load_math23k, load_shipped, size_prior_coverage
from .expr import Problem, answers_match, parse_text, try_evaluate
from .learner import STRATEGIES, TrainConfig, Trainer
from .policy import Policy
from .tree_reg import SizePrior

log = logging.getLogger(__name__)

KS = (1, 3, 5)
CONFIG_SCHEMA_VERSION = 1
CURVE_FIELDS = ("epoch", "strategy", "train_acc", "fixes_found", "mean_buffer_size", "loss")


def acc_at_k(predictions: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of problems whose top-``k`` candidates are *all* correct.

    Missing candidates count as failures.
    """
    if not predictions:
        return 0.0
    ok = sum(len(c) >= k and all(c[:k]) for c in predictions)
    return ok / len(predictions)


def mean_rank_acc(predictions: Sequence[Sequence[bool]], k: int) -> float:
    """Average over problems of the fraction of correct top-``k`` candidates."""
    if not predictions:
        return 0.0
    return float(np.mean([sum(c[:k]) / k for c in predictions]))


@dataclass
class EvalReport:
    acc: dict[int, float]
    acc_mean_rank: dict[int, float]
    problems: list[dict] = field(default_factory=list)
    exec_errors: int = 0
    padded: int = 0

    def to_json(self) -> dict:
        return {
            "acc_all_topk": {f"@{k}": v for k, v in self.acc.items()},
            "acc_mean_rank": {f"@{k}": v for k, v in self.acc_mean_rank.items()},
            "exec_errors": self.exec_errors,
            "padded": self.padded,
            "n_problems": len(self.problems),
            "problems": self.problems,
        }


def beam_candidates(policy: Policy, problem: Problem, prior: SizePrior, width: int = 5, enc=None):
    """One beam per admissible size, merged by log-probability, top ``width``."""
    enc = enc or policy.encode(problem)
    merged = []
    for l in prior.sizes(problem.n_quantities):
        merged.extend(policy.decode(problem, l, "beam", width=width, enc=enc))
    merged.sort(key=lambda t: (-t.logprob, t.tokens))
    return merged[:width]


def evaluate(policy: Policy, problems: Sequence[Problem], prior: SizePrior = SizePrior(),
             width: int = 5, ks: Sequence[int] = KS) -> EvalReport:
    rows, flags = [], []
    errors = padded = 0
    for p in problems:
        cands = []
        for tr in beam_candidates(policy, p, prior, width):
            v = try_evaluate(parse_text(tr.text), p.quantities)
            errors += v is None
            cands.append({"prefix": tr.text, "logprob": tr.logprob, "value": v,
                          "correct": answers_match(v, p.answer)})
        padded += max(0, width - len(cands))
        rows.append({"id": p.id, "answer": p.answer, "candidates": cands})
        flags.append([c["correct"] for c in cands])
    return EvalReport(
        acc={k: acc_at_k(flags, k) for k in ks},
        acc_mean_rank={k: mean_rank_acc(flags, k) for k in ks},
        problems=rows,
        exec_errors=errors,
        padded=padded,
    )


def recheck_report(report: dict) -> list[str]:
    """Recompute every figure in a report JSON from its per-problem rows.

    Returns a list of discrepancies (empty when the report is consistent).
    """
    issues = []
    flags = []
    errors = 0
    for row in report["problems"]:
        f = []
        for c in row["candidates"]:
            ok = answers_match(c["value"], row["answer"])
            if ok != c["correct"]:
                issues.append(f"{row['id']}: candidate {c['prefix']} correctness flag is wrong")
            errors += c["value"] is None
            f.append(ok)
        flags.append(f)
    for key, fn in (("acc_all_topk", acc_at_k), ("acc_mean_rank", mean_rank_acc)):
        for name, val in report[key].items():
            k = int(name.lstrip("@"))
            if not math.isclose(fn(flags, k), val, abs_tol=1e-12):
                issues.append(f"{key}{name}: stored {val}, recomputed {fn(flags, k)}")
    if errors != report["exec_errors"]:
        issues.append(f"exec_errors: stored {report['exec_errors']}, recomputed {errors}")
    return issues


# ------------------------------------------------------------------ configs


class ConfigError(ValueError):
    pass


_TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__)
_TOP_FIELDS = {"schema_version", "seed", "output_dir", "corpus", "train", "grid", "eval"}
_CORPUS_FIELDS = {"path", "shipped", "synthetic", "test_fraction", "split_seed"}
_EVAL_FIELDS = {"beam_width", "split"}


def _check_keys(obj, allowed: set, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{k}: unknown field")


def _prior(value, path: str) -> SizePrior:
    if isinstance(value, SizePrior):
        return value
    if isinstance(value, str):
        value = [int(x) for x in value.split(",")]
    if isinstance(value, dict):
        return SizePrior(**value)
    if isinstance(value, (list, tuple)) and len(value) == 4:
        return SizePrior(*[int(x) for x in value])
    raise ConfigError(f"{path}: expected four integers a_min,b_min,a_max,b_max")


def validate_config(cfg: dict) -> dict:
    """Check field names and types; returns a normalized deep copy."""
    cfg = copy.deepcopy(cfg)
    _check_keys(cfg, _TOP_FIELDS, "")
    version = cfg.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version}")
    corpus = cfg.setdefault("corpus", {"synthetic": {"n_problems": 200, "seed": 0}})
    _check_keys(corpus, _CORPUS_FIELDS, "corpus")
    if sum(k in corpus for k in ("path", "shipped", "synthetic")) != 1:
        raise ConfigError("corpus: give exactly one of path, shipped, synthetic")
    train = cfg.setdefault("train", {})
    _check_keys(train, _TRAIN_FIELDS, "train")
    if "prior" in train:
        train["prior"] = _prior(train["prior"], "train.prior")
    grid = cfg.setdefault("grid", {})
    _check_keys(grid, _TRAIN_FIELDS, "grid")
    for k, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{k}: expected a non-empty list")
        if k == "prior":
            grid[k] = [_prior(v, f"grid.prior[{i}]") for i, v in enumerate(vals)]
        if k == "strategy":
            for i, v in enumerate(vals):
                if v not in STRATEGIES:
                    raise ConfigError(f"grid.strategy[{i}]: unknown strategy {v!r}")
    ev = cfg.setdefault("eval", {})
    _check_keys(ev, _EVAL_FIELDS, "eval")
    if "seed" in cfg and not isinstance(cfg["seed"], int):
        raise ConfigError("seed: expected an integer")
    for k, v in train.items():
        try:
            TrainConfig(**{k: v})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.{k}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return validate_config(raw)


def load_corpus(section: dict) -> Corpus:
    if "path" in section:
        corpus = load_math23k(section["path"])
    elif "shipped" in section:
        corpus = load_shipped(section["shipped"])
    else:
        syn = dict(section["synthetic"] or {})
        corpus = gen_synthetic(syn.get("n_problems", 200), seed=syn.get("seed", 0),
                               test_fraction=section.get("test_fraction", 0.2))
    if not corpus.split:
        corpus = corpus.resplit(section.get("test_fraction", 0.2), section.get("split_seed", 0))
    return corpus


def run_name(overrides: dict) -> str:
    if not overrides:
        return "run"
    parts = []
    for k, v in overrides.items():
        if isinstance(v, SizePrior):
            v = f"{v.a_min}_{v.b_min}_{v.a_max}_{v.b_max}"
        parts.append(f"{k}={v}")
    return ",".join(parts).replace("/", "_")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def run_one(corpus: Corpus, config: TrainConfig, out: Path | None, name: str,
            beam_width: int = 5, eval_split: str = "test") -> dict:
    """Train one configuration, write its artifacts, return a summary row."""
    trainer = Trainer(corpus.train, config)
    curve_fh = writer = None
    if out is not None:
        for sub in ("curves", "reports", "checkpoints", "buffers"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        curve_fh = open(out / "curves" / f"{name}.csv", "w", newline="")
        writer = csv.writer(curve_fh, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)

    def on_epoch(row: dict) -> None:
        if writer is not None:
            writer.writerow([_fmt(row[f]) for f in CURVE_FIELDS])
            curve_fh.flush()

    try:
        rows = trainer.train(on_epoch)
    finally:
        if curve_fh is not None:
            curve_fh.close()
        if out is not None:
            (out / "buffers" / f"{name}.txt").write_text(trainer.buffers.dump())
    problems = corpus.part(eval_split)
    report = evaluate(trainer.policy, problems, config.prior, beam_width)
    if out is not None:
        trainer.policy.save(out / "checkpoints" / f"{name}.npz")
        with open(out / "reports" / f"{name}.json", "w") as fh:
            json.dump(report.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    summary = {
        "run": name,
        "strategy": config.strategy,
        "final_train_acc": rows[-1]["train_acc"],
        **{f"acc@{k}": report.acc[k] for k in report.acc},
        **{f"mean_rank_acc@{k}": report.acc_mean_rank[k] for k in report.acc_mean_rank},
        "buffer_violations": trainer.buffers.verify(trainer.by_id),
        "unverified_supervised_updates": trainer.counters.unverified_supervised_updates,
    }
    return {"summary": summary, "curve": rows, "report": report, "trainer": trainer}


def run_experiment(cfg: dict | str | Path, output_dir: str | Path | None = None,
                   seed: int | None = None) -> list[dict]:
    """Run every grid point of a config; returns the summary rows."""
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    else:
        cfg = validate_config(cfg)
    if seed is not None:
        cfg["seed"] = seed
    out = output_dir or cfg.get("output_dir")
    out = Path(out) if out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg["corpus"])
    base = dict(cfg["train"])
    if "seed" in cfg:
        base["seed"] = cfg["seed"]
    grid = cfg["grid"]
    keys = list(grid)
    summaries = []
    ev = cfg["eval"]
    for combo in itertools.product(*(grid[k] for k in keys)) if keys else [()]:
        overrides = dict(zip(keys, combo))
        tc = TrainConfig(**{**base, **overrides})
        name = run_name(overrides)
        log.info("run %s", name)
        res = run_one(corpus, tc, out, name, ev.get("beam_width", tc.beam_width), ev.get("split", "test"))
        summaries.append(res["summary"])
    if out is not None:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summaries[0]), lineterminator="\n")
            w.writeheader()
            for s in summaries:
                w.writerow({k: _fmt(v) for k, v in s.items()})
        if corpus.gold_sizes and corpus.provenance == "math23k":
            cov = size_prior_coverage(corpus.gold_sizes)
            (out / "size_prior_coverage.json").write_text(json.dumps({"coverage": cov}) + "\n")
    return summaries
