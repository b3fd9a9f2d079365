"""Tree-size priors and prefix-syntax vocabulary masks.

Decoding a tree of exact size ``l`` in prefix order obeys two rules:

1. at most ``l // 2`` operators may be emitted;
2. before the last position, the number of numerics (quantities and
   constants) may not exceed the number of operators.

Together they force the emitted sequence to be a complete expression
exactly when ``l`` tokens have been produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Iterator, Sequence

import numpy as np

from .expr import ExprTree, Leaf, Node, Token, Vocab

MAX_ENUM_SIZE = 11


class SizeTooLarge(ValueError):
    pass


class InvalidState(AssertionError):
    pass


@dataclass(frozen=True)
class SizePrior:
    """Linear prior ``[a_min * n + b_min, a_max * n + b_max]`` on tree size."""

    a_min: int = 2
    b_min: int = -1
    a_max: int = 2
    b_max: int = 3

    @classmethod
    def parse(cls, text: str) -> "SizePrior":
        """Read ``"2,-1,2,3"``."""
        a, b, c, d = (int(x) for x in text.split(","))
        return cls(a, b, c, d)

    def bounds(self, n_quantities: int) -> tuple[int, int]:
        return size_bounds(n_quantities, self)

    def sizes(self, n_quantities: int) -> list[int]:
        lo, hi = size_bounds(n_quantities, self)
        return list(range(lo, hi + 1, 2))


def size_bounds(n_quantities: int, prior: SizePrior = SizePrior()) -> tuple[int, int]:
    if n_quantities < 1:
        raise ValueError("need at least one quantity")
    lo = prior.a_min * n_quantities + prior.b_min
    hi = prior.a_max * n_quantities + prior.b_max
    # valid sizes are odd: round the lower bound up and the upper bound down
    lo = max(lo, 1)
    if lo % 2 == 0:
        lo += 1
    if hi % 2 == 0:
        hi -= 1
    hi = max(hi, lo)
    return lo, hi


@dataclass
class DecodeState:
    target_size: int
    emitted: list[Token] = field(default_factory=list)
    n_ops: int = 0
    n_nums: int = 0

    def __post_init__(self):
        if self.target_size < 1 or self.target_size % 2 == 0:
            raise ValueError(f"target size must be odd and positive, got {self.target_size}")

    @property
    def position(self) -> int:
        """1-based position of the next token."""
        return len(self.emitted) + 1

    @property
    def done(self) -> bool:
        return len(self.emitted) == self.target_size

    def allows(self, is_op: bool) -> bool:
        return _allows(self.target_size, self.n_ops, self.n_nums, is_op)

    def push(self, tok: Token) -> None:
        if self.done:
            raise InvalidState("decode already complete")
        if not self.allows(tok.is_op):
            raise InvalidState(f"{tok.symbol} not admitted at position {self.position}")
        self.emitted.append(tok)
        if tok.is_op:
            self.n_ops += 1
        else:
            self.n_nums += 1

    def copy(self) -> "DecodeState":
        return DecodeState(self.target_size, list(self.emitted), self.n_ops, self.n_nums)


def _allows(l: int, n_ops: int, n_nums: int, is_op: bool) -> bool:
    pos = n_ops + n_nums + 1
    if is_op:
        return n_ops < l // 2
    # rule 2 bounds the count *after* emitting at non-final positions
    return pos == l or n_nums + 1 <= n_ops


def category_mask(target_size: int, n_ops: int, n_nums: int) -> tuple[bool, bool]:
    """(operators admitted, numerics admitted) for the next position."""
    ops_ok = _allows(target_size, n_ops, n_nums, True)
    nums_ok = _allows(target_size, n_ops, n_nums, False)
    if not (ops_ok or nums_ok):
        raise InvalidState(
            f"no legal token at position {n_ops + n_nums + 1} of {target_size}"
        )
    return ops_ok, nums_ok


def valid_token_mask(state: DecodeState, vocab: Vocab | Sequence[Token]) -> np.ndarray:
    if len(state.emitted) >= state.target_size:
        raise InvalidState("mask requested past the target size")
    ops_ok, nums_ok = category_mask(state.target_size, state.n_ops, state.n_nums)
    is_op = vocab.is_op if isinstance(vocab, Vocab) else np.array([t.is_op for t in vocab])
    return np.where(is_op, ops_ok, nums_ok)


def count_trees(size: int, n_ops: int, n_nums: int) -> int:
    """Closed form: Catalan(k) * o**k * v**(k+1) with k = size // 2."""
    if size % 2 == 0:
        return 0
    k = size // 2
    catalan = comb(2 * k, k) // (k + 1)
    return catalan * n_ops**k * n_nums ** (k + 1)


def _shapes(n_internal: int) -> Iterator[object]:
    # shape = None (leaf) or (left_shape, right_shape)
    if n_internal == 0:
        yield None
        return
    for k in range(n_internal):
        for ls in _shapes(k):
            for rs in _shapes(n_internal - 1 - k):
                yield (ls, rs)


def _fill(shape, ops: Sequence[Token], nums: Sequence[Token]) -> Iterator[ExprTree]:
    if shape is None:
        for t in nums:
            yield Leaf(t)
        return
    lshape, rshape = shape
    for o in ops:
        for lt in _fill(lshape, ops, nums):
            for rt in _fill(rshape, ops, nums):
                yield Node(o, lt, rt)


def iter_trees(vocab: Vocab | Sequence[Token], size: int) -> Iterator[ExprTree]:
    """All trees of exactly ``size`` tokens, built shape by shape."""
    toks = list(vocab)
    ops = [t for t in toks if t.is_op]
    nums = [t for t in toks if not t.is_op]
    if size % 2 == 0 or size < 1:
        return
    if size > 1 and not ops:
        return
    for s in _shapes(size // 2):
        yield from _fill(s, ops, nums)


def enumerate_trees(vocab: Vocab | Sequence[Token], size_range: int | Sequence[int]) -> list[ExprTree]:
    """Exhaustive list of trees for every size in ``size_range``.

    ``size_range`` is a single size, an iterable of sizes, or an inclusive
    ``(lo, hi)`` pair given as a tuple.
    """
    sizes = _as_sizes(size_range)
    if sizes and max(sizes) > MAX_ENUM_SIZE:
        raise SizeTooLarge(f"enumeration limited to size {MAX_ENUM_SIZE}")
    out: list[ExprTree] = []
    for l in sizes:
        out.extend(iter_trees(vocab, l))
    return out


def _as_sizes(size_range) -> list[int]:
    if isinstance(size_range, int):
        return [size_range]
    if isinstance(size_range, tuple) and len(size_range) == 2:
        lo, hi = size_range
        return [l for l in range(lo, hi + 1) if l % 2 == 1]
    return sorted({int(l) for l in size_range if int(l) % 2 == 1})


def mask_walk(vocab: Vocab | Sequence[Token], size: int) -> Iterator[tuple[Token, ...]]:
    """Every token sequence reachable by following the masks to ``size``."""
    toks = list(vocab)
    state = DecodeState(size)

    def rec() -> Iterator[tuple[Token, ...]]:
        if state.done:
            yield tuple(state.emitted)
            return
        ops_ok, nums_ok = category_mask(size, state.n_ops, state.n_nums)
        for t in toks:
            if (t.is_op and ops_ok) or (not t.is_op and nums_ok):
                saved = (state.n_ops, state.n_nums)
                state.push(t)
                yield from rec()
                state.emitted.pop()
                state.n_ops, state.n_nums = saved

    yield from rec()


def random_masked_sequence(vocab: Vocab, size: int, rng: np.random.Generator) -> list[Token]:
    state = DecodeState(size)
    while not state.done:
        mask = valid_token_mask(state, vocab)
        choices = np.flatnonzero(mask)
        state.push(vocab.tokens[int(rng.choice(choices))])
    return state.emitted

