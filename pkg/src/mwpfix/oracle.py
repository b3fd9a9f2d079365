"""Brute-force references used to check the search code.

Nothing here shares code paths with the fixer or the decoder beyond the
scalar evaluator's error semantics.
"""
from __future__ import annotations

import bisect
from typing import Sequence

import numpy as np

from .expr import (
    ANSWER_RTOL,
    DIV_EPS,
    EvalError,
    ExprTree,
    Leaf,
    Node,
    Problem,
    Token,
    Vocab,
    answers_match,
    apply_op,
    parse_prefix,
    to_prefix,
    try_evaluate,
)
from .tree_reg import SizeTooLarge, _as_sizes

MAX_ORACLE_SIZE = 9
MAX_ORACLE_NUMERICS = 6
_CHUNK = 1 << 22


def postfix_evaluate(tokens: Sequence[Token], quantities: Sequence[float]) -> float:
    """Evaluate a prefix token list by scanning it right to left with a stack."""
    stack: list[float] = []
    for tok in reversed(list(tokens)):
        if tok.is_op:
            if len(stack) < 2:
                raise ValueError("malformed expression")
            a = stack.pop()
            b = stack.pop()
            stack.append(apply_op(tok.symbol, a, b))
        else:
            stack.append(tok.value(quantities))
    if len(stack) != 1:
        raise ValueError("malformed expression")
    return stack[0]


def single_substitutions(tokens: Sequence[Token], vocab: Vocab) -> list[list[Token]]:
    """Every sequence one category-preserving substitution away."""
    out = []
    for i, cur in enumerate(tokens):
        for t in vocab.tokens:
            if t != cur and t.is_op == cur.is_op:
                cand = list(tokens)
                cand[i] = t
                out.append(cand)
    return out


def brute_force_fix(
    tokens: Sequence[Token], y: float, quantities: Sequence[float], vocab: Vocab
) -> list[list[Token]]:
    """All sequences within one substitution of ``tokens`` that execute to ``y``."""
    tokens = list(tokens)
    if answers_match(try_evaluate(parse_prefix(tokens), quantities), y):
        return [tokens]
    return [
        c
        for c in single_substitutions(tokens, vocab)
        if answers_match(try_evaluate(parse_prefix(c), quantities), y)
    ]


def _vec_apply(symbol: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        if symbol == "+":
            r = a + b
        elif symbol == "-":
            r = a - b
        elif symbol == "*":
            r = a * b
        elif symbol == "/":
            r = np.where(np.abs(b) < DIV_EPS, np.nan, a / np.where(np.abs(b) < DIV_EPS, 1.0, b))
        else:
            bad = ((a < 0) & (b != np.floor(b))) | ((a == 0) & (b < 0))
            r = np.where(bad, np.nan, np.power(a, b))
    r[~np.isfinite(r)] = np.nan
    return r


class _Table:
    """Values of every tree of each size, stored block by block.

    A block is all (left, right) pairs for one operator and one split of
    the size; flat index ``k`` in a block is ``i * n_right + j``.
    """

    def __init__(self, ops: list[Token], nums: list[Token], quantities: Sequence[float]):
        self.ops = ops
        self.nums = nums
        self.values: dict[int, np.ndarray] = {
            1: np.array([t.value(quantities) for t in nums], dtype=float)
        }
        self.blocks: dict[int, list[tuple[int, Token, int, int]]] = {}

    def splits(self, size: int):
        for ls in range(1, size - 1, 2):
            yield ls, size - 1 - ls

    def build(self, size: int) -> np.ndarray:
        if size in self.values:
            return self.values[size]
        parts, blocks, offset = [], [], 0
        for o in self.ops:
            for ls, rs in self.splits(size):
                lv, rv = self.build(ls), self.build(rs)
                block = _vec_apply(o.symbol, lv[:, None], rv[None, :]).ravel()
                blocks.append((offset, o, ls, rs))
                parts.append(block)
                offset += block.size
        self.values[size] = np.concatenate(parts) if parts else np.empty(0)
        self.blocks[size] = blocks
        return self.values[size]

    def decode(self, size: int, idx: int) -> ExprTree:
        if size == 1:
            return Leaf(self.nums[idx])
        blocks = self.blocks[size]
        b = bisect.bisect_right([blk[0] for blk in blocks], idx) - 1
        offset, o, ls, rs = blocks[b]
        k = idx - offset
        n_right = self.values[rs].size
        return Node(o, self.decode(ls, k // n_right), self.decode(rs, k % n_right))

    def matches(self, size: int, y: float) -> list[ExprTree]:
        tol = ANSWER_RTOL * max(1.0, abs(y))
        if size == 1:
            v = self.values[1]
            return [Leaf(self.nums[i]) for i in np.flatnonzero(np.abs(v - y) <= tol)]
        out: list[ExprTree] = []
        for o in self.ops:
            for ls, rs in self.splits(size):
                lv, rv = self.build(ls), self.build(rs)
                rows = max(1, _CHUNK // max(rv.size, 1))
                for start in range(0, lv.size, rows):
                    block = _vec_apply(o.symbol, lv[start:start + rows, None], rv[None, :])
                    ii, jj = np.nonzero(np.abs(block - y) <= tol)
                    for i, j in zip(ii.tolist(), jj.tolist()):
                        out.append(Node(o, self.decode(ls, start + i), self.decode(rs, j)))
        return out


def oracle_solutions(
    problem: Problem,
    size_range: int | Sequence[int] | tuple[int, int],
    vocab: Vocab | Sequence[Token] | None = None,
) -> list[ExprTree]:
    """Every tree in the size range whose value matches the problem's answer.

    Exhaustive: subtrees are tabulated bottom-up with numpy and the root
    level is scanned in chunks, so sizes up to 9 with six numerics are
    tractable.  Each hit is re-checked with the scalar evaluator.
    """
    toks = list(vocab if vocab is not None else problem.vocab)
    ops = [t for t in toks if t.is_op]
    nums = [t for t in toks if not t.is_op]
    sizes = _as_sizes(size_range)
    if sizes and max(sizes) > MAX_ORACLE_SIZE:
        raise SizeTooLarge(f"oracle limited to size {MAX_ORACLE_SIZE}")
    if len(nums) > MAX_ORACLE_NUMERICS:
        raise SizeTooLarge(f"oracle limited to {MAX_ORACLE_NUMERICS} numeric tokens")
    table = _Table(ops, nums, problem.quantities)
    out: list[ExprTree] = []
    for l in sizes:
        if l > 1 and not ops:
            continue
        for tree in table.matches(l, problem.answer):
            if answers_match(try_evaluate(tree, problem.quantities), problem.answer):
                out.append(tree)
    return out


def count_solutions_by_enumeration(problem: Problem, size: int, vocab: Vocab | Sequence[Token]) -> int:
    """Reference count: walk every prefix sequence right-to-left-first."""
    toks = list(vocab)
    ops = [t for t in toks if t.is_op][::-1]
    nums = [t for t in toks if not t.is_op][::-1]
    count = 0

    def rec(seq: list[Token], need: int):
        nonlocal count
        if need == 0:
            if len(seq) == size:
                try:
                    v = postfix_evaluate(seq, problem.quantities)
                except EvalError:
                    return
                if answers_match(v, problem.answer):
                    count += 1
            return
        remaining = size - len(seq)
        if need > remaining:
            return
        if remaining > need:
            for o in ops:
                rec(seq + [o], need + 1)
        for t in nums:
            rec(seq + [t], need - 1)

    rec([], 1)
    return count


def prefix_key(tree: ExprTree) -> str:
    return " ".join(t.symbol for t in to_prefix(tree))


__all__ = [
    "brute_force_fix",
    "count_solutions_by_enumeration",
    "oracle_solutions",
    "postfix_evaluate",
    "prefix_key",
    "single_substitutions",
]
