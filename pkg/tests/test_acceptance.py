"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N PASS|FAIL|SKIP`` line; the lines are
repeated in the terminal summary.  Run with ``pytest tests/test_acceptance.py``.
"""
import os
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from mwpfix.cli import DEFAULT_CONFIG
from mwpfix.data import load_math23k, size_prior_coverage
from mwpfix.expr import (
    EvalError,
    ParseError,
    Problem,
    Vocab,
    annotate,
    answers_match,
    evaluate,
    op,
    parse_prefix,
    parse_text,
    quant,
    to_prefix,
    try_evaluate,
)
from mwpfix.fixer import m_fix, one_fix, random_walk
from mwpfix.metrics import load_config, run_experiment
from mwpfix.oracle import brute_force_fix, single_substitutions
from mwpfix.policy import Policy, build_word_index
from mwpfix.tree_reg import count_trees, enumerate_trees, mask_walk, random_masked_sequence

pytestmark = pytest.mark.slow


# ------------------------------------------------------------------ 1


def test_fix_soundness(verdict):
    rng = np.random.default_rng(2024)
    vocab = Vocab(3)
    cases = found = bad = 0
    t0 = time.perf_counter()
    while cases < 1000:
        qs = tuple(float(x) for x in rng.integers(1, 30, size=3))
        size = int(rng.choice([3, 5, 7, 9]))
        target = random_masked_sequence(vocab, size, rng)
        y = try_evaluate(parse_prefix(target), qs)
        if y is None:
            continue
        start = list(target)
        for _ in range(int(rng.integers(1, 4))):
            start = random_walk(start, vocab, None, rng)
        problem = Problem(f"c{cases}", ("a", "b", "c"), qs, (0, 1, 2), y)
        res = m_fix(start, problem, m=50, rng=int(rng.integers(2**31)))
        cases += 1
        if res is not None:
            found += 1
            bad += not answers_match(try_evaluate(res.tree, qs), y)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 60
    verdict(1, "fix soundness", ok, f"{cases} cases, {found} fixed, {bad} wrong, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_one_fix_matches_brute_force(verdict):
    qs = (3.0, 5.0)
    vocab = Vocab(2).restricted([op("+"), op("-"), op("*"), op("/"), quant(0), quant(1)])
    checked = disagree = unevaluable = 0
    for tree in enumerate_trees(vocab, (1, 7)):
        toks = to_prefix(tree)
        try:
            ann = annotate(toks, qs)
        except EvalError:
            # node values are undefined, so there is nothing to propagate
            unevaluable += 1
            continue
        targets = {ann.value + 0.37, 1234.5}
        for cand in single_substitutions(toks, vocab):
            v = try_evaluate(parse_prefix(cand), qs)
            if v is not None:
                targets.add(v)
        for y in sorted(targets):
            checked += 1
            hit = one_fix(ann, y, qs, vocab)
            oracle = brute_force_fix(toks, y, qs, vocab)
            if (hit is not None) != bool(oracle):
                disagree += 1
            elif hit is not None:
                assert hit[0] in oracle
    ok = disagree == 0
    verdict(2, "1-FIX vs brute force", ok,
            f"{checked} (tree, target) pairs, {disagree} disagreements, {unevaluable} trees not executable")
    assert ok


# ------------------------------------------------------------------ 3


@lru_cache(None)
def _count_recurrence(size, o, v):
    if size == 1:
        return v
    return sum(o * _count_recurrence(ls, o, v) * _count_recurrence(size - 1 - ls, o, v) for ls in range(1, size - 1, 2))


def test_tree_regularization(verdict):
    rng = np.random.default_rng(7)
    vocab = Vocab(3)
    bad = 0
    for l in range(1, 16, 2):
        for _ in range(10_000):
            seq = random_masked_sequence(vocab, l, rng)
            try:
                ok = len(to_prefix(parse_prefix(seq))) == l
            except ParseError:
                ok = False
            bad += not ok
    small = [op("+"), op("*"), quant(0), quant(1), quant(2)]
    mismatches = []
    for l in (1, 3, 5, 7):
        n_enum = len(enumerate_trees(small, l))
        n_mask = sum(1 for _ in mask_walk(small, l))
        n_closed = count_trees(l, 2, 3)
        n_rec = _count_recurrence(l, 2, 3)
        if not n_enum == n_mask == n_closed == n_rec:
            mismatches.append((l, n_enum, n_mask, n_closed, n_rec))
    ok = bad == 0 and not mismatches
    verdict(3, "tree regularization", ok, f"80000 masked decodes, {bad} invalid; count mismatches {mismatches}")
    assert ok


# ------------------------------------------------------------------ 4


def test_gradient_check(verdict):
    p = Problem("g", ("a", "has", "3", "apples", "and", "5", "pears", "?"), (3.0, 5.0), (2, 5), 15.0)
    trees = [parse_text("* n0 n1"), parse_text("+ n0 * n1 2"), parse_text("- * n1 n0 + pi n0")]
    weights = [1.0, -0.5, 2.0]
    eps = 1e-4
    worst = 0.0
    worst_block = ""
    for seed in range(20):
        pol = Policy.create(build_word_index([p]), d=4, seed=seed, scale=0.5)
        _, grads = pol.loss_and_grads(p, trees, weights)
        for name, v in pol.params.items():
            fd = np.zeros_like(v)
            for idx in np.ndindex(v.shape):
                old = v[idx]
                v[idx] = old + eps
                hi, _ = pol.loss_and_grads(p, trees, weights)
                v[idx] = old - eps
                lo, _ = pol.loss_and_grads(p, trees, weights)
                v[idx] = old
                fd[idx] = (hi - lo) / (2 * eps)
            rel = np.linalg.norm(fd - grads[name]) / max(np.linalg.norm(fd) + np.linalg.norm(grads[name]), 1e-12)
            if rel > worst:
                worst, worst_block = rel, f"{name} seed {seed}"
    ok = worst <= 1e-4
    verdict(4, "gradient check", ok, f"20 seeds, worst relative error {worst:.2e} ({worst_block})")
    assert ok


# ------------------------------------------------------------------ 5, 6, 8


@pytest.fixture(scope="module")
def strategy_runs(tmp_path_factory):
    cfg = load_config(DEFAULT_CONFIG)
    out = tmp_path_factory.mktemp("runs")
    t0 = time.perf_counter()
    rows = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    return {r["strategy"]: r for r in rows}, elapsed, cfg


def test_convergence_ordering(verdict, strategy_runs):
    runs, elapsed, _ = strategy_runs
    lbf, mapo, rf = (runs[s]["final_train_acc"] for s in ("LBF", "MAPO", "REINFORCE"))
    ok = lbf >= 0.80 and lbf > mapo > rf and lbf >= 2 * rf and elapsed < 1800
    verdict(5, "convergence ordering", ok,
            f"final train acc LBF {lbf:.3f}, MAPO {mapo:.3f}, REINFORCE {rf:.3f}; "
            f"grid of 4 strategies in {elapsed:.0f}s")
    assert ok


def test_memory_diversity(verdict, strategy_runs):
    runs, _, _ = strategy_runs
    mem, nomem = runs["LBF"], runs["LBF-no-memory"]
    ok = mem["acc@3"] > nomem["acc@3"] and mem["acc@5"] > nomem["acc@5"]
    verdict(6, "memory diversity", ok,
            f"Acc@3 {mem['acc@3']:.3f} vs {nomem['acc@3']:.3f}, Acc@5 {mem['acc@5']:.3f} vs {nomem['acc@5']:.3f}")
    assert ok


def test_step_budget(verdict, strategy_runs, tmp_path):
    runs, _, cfg = strategy_runs
    cfg = dict(cfg, grid={}, train=dict(cfg["train"], strategy="LBF", m=1))
    one = run_experiment(cfg, tmp_path)[0]
    fifty = runs["LBF"]
    ok = fifty["final_train_acc"] >= one["final_train_acc"] and fifty["acc@1"] >= one["acc@1"]
    verdict(8, "step budget", ok,
            f"m=50 train {fifty['final_train_acc']:.3f} test@1 {fifty['acc@1']:.3f}; "
            f"m=1 train {one['final_train_acc']:.3f} test@1 {one['acc@1']:.3f}")
    assert ok


# ------------------------------------------------------------------ 7


def test_size_prior_coverage(verdict):
    path = os.environ.get("MATH23K_PATH")
    if not path or not Path(path).exists():
        verdict(7, "size-prior coverage", None, "no Math23K file (set MATH23K_PATH to run)")
        pytest.skip("Math23K not supplied")
    corpus = load_math23k(path)
    cov = size_prior_coverage(corpus.gold_sizes)
    ok = 0.83 <= cov <= 0.93
    verdict(7, "size-prior coverage", ok, f"{cov:.3f} of {len(corpus.gold_sizes)} gold expressions")
    assert ok


# ------------------------------------------------------------------ 9


def test_determinism(verdict, tmp_path):
    cfg = load_config(DEFAULT_CONFIG)
    cfg = dict(cfg, grid={"strategy": ["LBF", "MAPO"]}, train=dict(cfg["train"], epochs=3))
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    differing = []
    for sub in ("curves", "reports", "buffers"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            if f.read_bytes() != (tmp_path / "b" / sub / f.name).read_bytes():
                differing.append(f"{sub}/{f.name}")
    ok = not differing
    verdict(9, "determinism", ok, "byte-identical" if ok else f"differ: {differing}")
    assert ok


# ------------------------------------------------------------------ 10


def test_golden_example(verdict):
    qs = [100.0, 2.0, 3.5]
    values = [evaluate(parse_text(s), qs) for s in ("× ÷ n0 n1 + n1 n2", "+ n0 × ÷ n0 n1 n2")]
    ok = all(abs(v - 275.0) <= 1e-9 for v in values)
    verdict(10, "golden example", ok, f"values {values}")
    assert ok
