"""Repairing wrong expression trees by top-down error propagation.

``one_fix`` searches for a single token substitution that makes a tree
execute to a target value.  Starting at the root with the target as its
expected value, it inverts each operator to get the value a child would
need, and keeps the candidate positions in a priority queue ordered by
how readily the policy would change them.  ``m_fix`` interleaves that
search with random one-token perturbations to reach fixes further away.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expr import (
    DIV_EPS,
    OPERATORS,
    AnnotatedTree,
    EvalError,
    ExprTree,
    Kind,
    Problem,
    Token,
    Vocab,
    annotate,
    answers_match,
    apply_op,
    parse_prefix,
    to_prefix,
    try_evaluate,
)

VALUE_RTOL = 1e-6
MAX_POPS = 10_000
DEFAULT_STEPS = 50

LEFT, RIGHT, OPERATOR = "left", "right", "op"

ProbFn = Callable[[Sequence[Token]], np.ndarray]


@dataclass(frozen=True)
class FixTuple:
    """Queue entry.

    ``slot == "value"``: the subtree rooted at ``position`` should evaluate
    to ``expected`` (a float).  ``slot == "symbol"``: the token at
    ``position`` is to be replaced by ``expected`` (a Token).
    """

    position: int
    slot: str
    expected: float | Token
    priority: float
    seq: int

    def key(self) -> tuple[float, int]:
        return (-self.priority, self.seq)


@dataclass(frozen=True)
class FixResult:
    tree: ExprTree
    edit_distance: int
    steps: int

    @property
    def tokens(self) -> list[Token]:
        return to_prefix(self.tree)


def _close(a: float, b: float, rtol: float = VALUE_RTOL) -> bool:
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def _finite(xs: list[float]) -> list[float]:
    return [x for x in xs if math.isfinite(x)]


def _pow_left(r: float, alpha: float) -> list[float]:
    """All real x with x ** r == alpha."""
    if r == 0:
        return []
    if float(r).is_integer():
        k = int(r)
        if alpha == 0:
            return [0.0] if k > 0 else []
        if alpha > 0:
            root = alpha ** (1.0 / k)
            return [root, -root] if k % 2 == 0 else [root]
        return [-((-alpha) ** (1.0 / k))] if k % 2 != 0 else []
    if alpha > 0:
        return [alpha ** (1.0 / r)]
    if alpha == 0 and r > 0:
        return [0.0]
    return []


def _pow_right(l: float, alpha: float) -> list[float]:
    """All real x with l ** x == alpha (finitely many)."""
    if l > 0:
        if l == 1 or alpha <= 0:
            return []
        return [math.log(alpha) / math.log(l)]
    if l == 0:
        return []
    # negative base: only integer exponents are defined
    if alpha == 0:
        return []
    if l == -1:
        return [2.0, 0.0] if alpha == 1 else ([1.0, -1.0] if alpha == -1 else [])
    k = round(math.log(abs(alpha)) / math.log(-l))
    try:
        ok = _close(math.pow(l, k), alpha, 1e-9)
    except (OverflowError, ValueError):
        ok = False
    return [float(k)] if ok else []


def solve_candidates(
    parent_op: str, left: float, right: float, alpha: float, slot: str
) -> list:
    """Every value (or operator) the chosen slot could take so that the
    parent evaluates to ``alpha``."""
    if not math.isfinite(alpha):
        return []
    if slot == OPERATOR:
        for alt in OPERATORS:
            if alt == parent_op:
                continue
            try:
                if answers_match(apply_op(alt, left, right), alpha):
                    return [Token(Kind.OP, OPERATORS.index(alt))]
            except EvalError:
                continue
        return []
    with np.errstate(all="ignore"):
        try:
            if slot == LEFT:
                r = right
                if parent_op == "+":
                    out = [alpha - r]
                elif parent_op == "-":
                    out = [alpha + r]
                elif parent_op == "*":
                    out = [] if abs(r) < DIV_EPS else [alpha / r]
                elif parent_op == "/":
                    out = [alpha * r]
                else:
                    out = _pow_left(r, alpha)
            elif slot == RIGHT:
                l = left
                if parent_op == "+":
                    out = [alpha - l]
                elif parent_op == "-":
                    out = [l - alpha]
                elif parent_op == "*":
                    out = [] if abs(l) < DIV_EPS else [alpha / l]
                elif parent_op == "/":
                    out = [] if abs(alpha) < DIV_EPS else [l / alpha]
                    out = [x for x in out if abs(x) >= DIV_EPS]
                else:
                    out = _pow_right(l, alpha)
            else:
                raise ValueError(f"unknown slot {slot!r}")
        except (OverflowError, ZeroDivisionError, ValueError):
            return []
    return _finite(out)


def solve_child(parent_op: str, left: float, right: float, alpha: float, slot: str):
    """Expected value (or replacement operator) for one child slot, or None.

    ``slot`` is ``"left"``, ``"right"`` or ``"op"``.  For even integer
    exponents the principal (non-negative) root is returned; ``one_fix``
    also tries the negative one.
    """
    cands = solve_candidates(parent_op, left, right, alpha, slot)
    return cands[0] if cands else None


def _uniform(n_pos: int, n_vocab: int) -> np.ndarray:
    return np.full((n_pos, n_vocab), 1.0 / n_vocab)


def _match_value(
    alpha: float,
    current: Token,
    vocab: Vocab,
    quantities: Sequence[float],
    probs_row: np.ndarray,
) -> Token | None:
    best, best_p = None, -1.0
    for j, tok in enumerate(vocab.tokens):
        if tok.is_op or tok == current:
            continue
        if _close(tok.value(quantities), alpha):
            if probs_row[j] > best_p:
                best, best_p = tok, float(probs_row[j])
    return best


def one_fix(
    tree: AnnotatedTree,
    y: float,
    quantities: Sequence[float],
    vocab: Vocab,
    max_pops: int = MAX_POPS,
) -> tuple[list[Token], int] | None:
    """Most probable single-symbol substitution making ``tree`` execute to ``y``.

    Returns ``(tokens, edit_distance)`` with distance 0 when the tree is
    already correct, or None when the queue is exhausted.
    """
    if answers_match(tree.value, y):
        return list(tree.tokens), 0
    probs = tree.probs if tree.probs is not None else _uniform(tree.size, len(vocab))
    counter = itertools.count()
    heap: list[tuple[tuple[float, int], FixTuple]] = []

    def push(pos: int, slot: str, expected, p: float) -> None:
        ft = FixTuple(pos, slot, expected, float(p), next(counter))
        heapq.heappush(heap, (ft.key(), ft))

    def push_value(pos: int, alpha: float) -> None:
        tok = tree.tokens[pos]
        if tok.is_op:
            # descending into a subtree: likelier when the policy is unsure of it
            push(pos, "value", alpha, 1.0 - probs[pos][vocab.index(tok)])
            return
        new = _match_value(alpha, tok, vocab, quantities, probs[pos])
        if new is not None:
            push(pos, "symbol", new, probs[pos][vocab.index(new)])

    if tree.tokens[0].is_op:
        push(0, "value", y, 1.0)
    else:
        push_value(0, y)
    pops = 0
    while heap and pops < max_pops:
        _, ft = heapq.heappop(heap)
        pops += 1
        if ft.slot == "symbol":
            cand = list(tree.tokens)
            cand[ft.position] = ft.expected
            if answers_match(try_evaluate(parse_prefix(cand), quantities), y):
                return cand, 1
            continue
        a = ft.position
        op_sym = tree.tokens[a].symbol
        lv, rv = tree.values[tree.left[a]], tree.values[tree.right[a]]
        for slot, child in ((LEFT, tree.left[a]), (OPERATOR, a), (RIGHT, tree.right[a])):
            for cand in solve_candidates(op_sym, lv, rv, ft.expected, slot):
                if slot == OPERATOR:
                    if cand in vocab:
                        push(a, "symbol", cand, probs[a][vocab.index(cand)])
                else:
                    push_value(child, cand)
    return None


def random_walk(
    tokens: Sequence[Token],
    vocab: Vocab,
    probs: np.ndarray | None,
    rng: np.random.Generator,
    position: int | None = None,
) -> list[Token]:
    """Replace one symbol by another of the same category (operator or numeric).

    The replacement is drawn from the policy's distribution at that
    position restricted to the category, excluding the current symbol.
    """
    tokens = list(tokens)
    n = len(tokens)
    if probs is None:
        probs = _uniform(n, len(vocab))
    for _ in range(max(n, 1)):
        pos = int(rng.integers(n)) if position is None else position
        cur = tokens[pos]
        cols = [j for j, t in enumerate(vocab.tokens) if t.is_op == cur.is_op and t != cur]
        if not cols:
            if position is not None:
                break
            continue
        w = np.asarray(probs[pos][cols], dtype=float)
        total = w.sum()
        w = w / total if total > 0 and np.all(np.isfinite(w)) else np.full(len(cols), 1.0 / len(cols))
        j = cols[int(rng.choice(len(cols), p=w))]
        tokens[pos] = vocab.tokens[j]
        return tokens
    return tokens


def m_fix(
    tree: ExprTree | Sequence[Token],
    problem: Problem,
    y: float | None = None,
    m: int = DEFAULT_STEPS,
    prob_fn: ProbFn | None = None,
    rng: np.random.Generator | int | None = 0,
    vocab: Vocab | None = None,
) -> FixResult | None:
    """Search for a fix within ``m`` random-walk steps.

    Each iteration annotates the current tree (values and, through
    ``prob_fn``, the policy's per-position distributions), tries
    ``one_fix`` and otherwise perturbs one symbol.  Deterministic for a
    fixed seed.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    y = problem.answer if y is None else y
    vocab = vocab or problem.vocab
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    original = list(to_prefix(tree)) if not isinstance(tree, (list, tuple)) else list(tree)
    cur = list(original)
    for step in range(m + 1):
        probs = prob_fn(cur) if prob_fn is not None else None
        try:
            ann = annotate(cur, problem.quantities, probs)
        except EvalError:
            ann = None
        if ann is not None:
            hit = one_fix(ann, y, problem.quantities, vocab)
            if hit is not None:
                fixed = hit[0]
                dist = sum(a != b for a, b in zip(original, fixed))
                return FixResult(parse_prefix(fixed), dist, step)
        if step < m:
            cur = random_walk(cur, vocab, probs, rng)
    return None

