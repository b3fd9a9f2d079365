"""Expression trees over operators, constants and problem quantities.

Trees are immutable.  The canonical serialization is prefix (Polish)
notation, e.g. ``* / n0 n1 + n1 n2`` for ``(n0 / n1) * (n1 + n2)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

OPERATORS = ("+", "-", "*", "/", "^")
CONSTANTS = ("1", "2", "pi")
CONSTANT_VALUES = {"1": 1.0, "2": 2.0, "pi": math.pi}

# accepted aliases when reading prefix text
_OP_ALIASES = {"−": "-", "×": "*", "÷": "/", "∧": "^", "**": "^"}
_CONST_ALIASES = {"π": "pi", "3.14": "pi", "1.0": "1", "2.0": "2"}

DIV_EPS = 1e-12
ANSWER_RTOL = 1e-4


class Kind(enum.IntEnum):
    OP = 0
    CONST = 1
    QUANT = 2


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    pass


class Incomplete(ParseError):
    """The prefix sequence ended before every operator got two operands."""


class TrailingTokens(ParseError):
    """Symbols remain after a complete expression."""


class EvalError(ExprError):
    """The candidate tree cannot be executed (invalid candidate, not a bug)."""


class DivisionByZero(EvalError):
    pass


class DomainError(EvalError):
    pass


@dataclass(frozen=True, order=True)
class Token:
    kind: Kind
    index: int

    def __post_init__(self):
        if self.kind == Kind.OP and not 0 <= self.index < len(OPERATORS):
            raise ValueError(f"bad operator index {self.index}")
        if self.kind == Kind.CONST and not 0 <= self.index < len(CONSTANTS):
            raise ValueError(f"bad constant index {self.index}")
        if self.kind == Kind.QUANT and self.index < 0:
            raise ValueError(f"bad quantity index {self.index}")

    @property
    def is_op(self) -> bool:
        return self.kind == Kind.OP

    @property
    def symbol(self) -> str:
        if self.kind == Kind.OP:
            return OPERATORS[self.index]
        if self.kind == Kind.CONST:
            return CONSTANTS[self.index]
        return f"n{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Token":
        text = _OP_ALIASES.get(text, text)
        text = _CONST_ALIASES.get(text, text)
        if text in OPERATORS:
            return cls(Kind.OP, OPERATORS.index(text))
        if text in CONSTANTS:
            return cls(Kind.CONST, CONSTANTS.index(text))
        if len(text) > 1 and text[0] in "nq" and text[1:].isdigit():
            return cls(Kind.QUANT, int(text[1:]))
        raise ParseError(f"unknown symbol {text!r}")

    def value(self, quantities: Sequence[float]) -> float:
        if self.kind == Kind.CONST:
            return CONSTANT_VALUES[CONSTANTS[self.index]]
        if self.kind == Kind.QUANT:
            return float(quantities[self.index])
        raise TypeError("operators have no numeric value")

    def __str__(self) -> str:
        return self.symbol

    def __repr__(self) -> str:
        return f"Token({self.symbol})"


def op(symbol: str) -> Token:
    return Token(Kind.OP, OPERATORS.index(_OP_ALIASES.get(symbol, symbol)))


def const(symbol: str) -> Token:
    return Token(Kind.CONST, CONSTANTS.index(_CONST_ALIASES.get(symbol, symbol)))


def quant(i: int) -> Token:
    return Token(Kind.QUANT, i)


@dataclass(frozen=True)
class Leaf:
    token: Token

    def __post_init__(self):
        if self.token.is_op:
            raise ValueError("a leaf cannot hold an operator")

    @property
    def size(self) -> int:
        return 1

    def __str__(self) -> str:
        return self.token.symbol


@dataclass(frozen=True)
class Node:
    op: Token
    left: "ExprTree"
    right: "ExprTree"
    size: int = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.op.is_op:
            raise ValueError("internal nodes must hold an operator")
        object.__setattr__(self, "size", 1 + self.left.size + self.right.size)

    def __str__(self) -> str:
        return to_text(self)


ExprTree = Union[Leaf, Node]


def parse_prefix(tokens: Iterable[Token | str]) -> ExprTree:
    """Build the unique tree whose preorder traversal is ``tokens``."""
    seq = [t if isinstance(t, Token) else Token.parse(t) for t in tokens]
    if not seq:
        raise Incomplete("empty token sequence")
    tree, end = _parse_at(seq, 0)
    if end != len(seq):
        raise TrailingTokens(
            f"{len(seq) - end} symbol(s) after a complete expression: "
            + " ".join(t.symbol for t in seq[end:])
        )
    return tree


def _parse_at(seq: list[Token], pos: int) -> tuple[ExprTree, int]:
    # iterative to avoid deep recursion on long inputs
    stack: list[list] = []
    while True:
        if pos >= len(seq):
            raise Incomplete("operand missing at end of expression")
        tok = seq[pos]
        pos += 1
        if tok.is_op:
            stack.append([tok, None])
            continue
        sub: ExprTree = Leaf(tok)
        while stack:
            frame = stack[-1]
            if frame[1] is None:
                frame[1] = sub
                break
            stack.pop()
            sub = Node(frame[0], frame[1], sub)
        else:
            return sub, pos


def parse_text(text: str) -> ExprTree:
    """Parse whitespace-separated prefix text such as ``"* / n0 n1 + n1 n2"``."""
    return parse_prefix(text.split())


def to_prefix(tree: ExprTree) -> list[Token]:
    out: list[Token] = []
    stack = [tree]
    while stack:
        t = stack.pop()
        if isinstance(t, Leaf):
            out.append(t.token)
        else:
            out.append(t.op)
            stack.append(t.right)
            stack.append(t.left)
    return out


def to_text(tree: ExprTree) -> str:
    return " ".join(t.symbol for t in to_prefix(tree))


def to_infix(tree: ExprTree) -> str:
    if isinstance(tree, Leaf):
        return tree.token.symbol
    return f"({to_infix(tree.left)} {tree.op.symbol} {to_infix(tree.right)})"


def tree_size(tree: ExprTree) -> int:
    return tree.size


def n_operators(tree: ExprTree) -> int:
    return tree.size // 2


def shape(tree: ExprTree) -> str:
    """Structure signature: ``o`` for operators, ``x`` for leaves, in preorder."""
    return "".join("o" if t.is_op else "x" for t in to_prefix(tree))


def apply_op(symbol: str, a: float, b: float) -> float:
    """Apply one binary operator with the evaluator's error semantics."""
    if symbol == "+":
        r = a + b
    elif symbol == "-":
        r = a - b
    elif symbol == "*":
        r = a * b
    elif symbol == "/":
        if abs(b) < DIV_EPS:
            raise DivisionByZero(f"{a} / {b}")
        r = a / b
    elif symbol == "^":
        if a < 0 and not float(b).is_integer():
            raise DomainError(f"negative base {a} with non-integer exponent {b}")
        if a == 0 and b < 0:
            raise DivisionByZero(f"0 ^ {b}")
        try:
            r = math.pow(a, b)
        except (OverflowError, ValueError) as exc:
            raise DomainError(f"{a} ^ {b}: {exc}") from None
    else:
        raise ValueError(f"unknown operator {symbol!r}")
    if not math.isfinite(r):
        raise DomainError(f"non-finite result {a} {symbol} {b}")
    return r


def evaluate(tree: ExprTree, quantities: Sequence[float]) -> float:
    """Execute ``tree`` bottom-up.

    Raises :class:`DivisionByZero` or :class:`DomainError` for candidates
    that cannot be executed.
    """
    if isinstance(tree, Leaf):
        tok = tree.token
        if tok.kind == Kind.QUANT and tok.index >= len(quantities):
            raise IndexError(f"quantity {tok.symbol} out of range")
        return tok.value(quantities)
    return apply_op(
        tree.op.symbol,
        evaluate(tree.left, quantities),
        evaluate(tree.right, quantities),
    )


def try_evaluate(tree: ExprTree, quantities: Sequence[float]) -> float | None:
    try:
        return evaluate(tree, quantities)
    except EvalError:
        return None


def answers_match(predicted: float | None, target: float) -> bool:
    if predicted is None or not math.isfinite(predicted):
        return False
    return abs(predicted - target) <= ANSWER_RTOL * max(1.0, abs(target))


@dataclass(frozen=True)
class AnnotatedTree:
    """Preorder view of a tree with every node's value and token distribution.

    Position ``i`` is the handle of the ``i``-th token in prefix order.
    ``values[i]`` is the leaf value or the computed value of the subtree
    rooted at an operator.  ``probs[i]`` (optional) is the policy's
    distribution over the problem vocabulary at that decoding step.
    """

    tokens: tuple[Token, ...]
    values: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    probs: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def value(self) -> float:
        return self.values[0]

    def tree(self) -> ExprTree:
        return parse_prefix(self.tokens)


def annotate(
    tree: ExprTree | Sequence[Token],
    quantities: Sequence[float],
    probs: np.ndarray | None = None,
) -> AnnotatedTree:
    """Evaluate and record each node's value; raises :class:`EvalError`."""
    tokens = tuple(to_prefix(tree)) if isinstance(tree, (Leaf, Node)) else tuple(tree)
    n = len(tokens)
    left = [-1] * n
    right = [-1] * n
    ends = [0] * n
    # children positions: left child follows the operator; right child starts
    # where the left subtree ends
    for i in range(n - 1, -1, -1):
        if tokens[i].is_op:
            left[i] = i + 1
            right[i] = ends[i + 1]
            ends[i] = ends[right[i]]
        else:
            ends[i] = i + 1
    if ends[0] != n:
        raise TrailingTokens("token sequence is not a single expression")
    values = [0.0] * n
    for i in range(n - 1, -1, -1):
        tok = tokens[i]
        if tok.is_op:
            values[i] = apply_op(tok.symbol, values[left[i]], values[right[i]])
        else:
            values[i] = tok.value(quantities)
    if probs is not None and len(probs) != n:
        raise ValueError("need one token distribution per position")
    return AnnotatedTree(tokens, tuple(values), tuple(left), tuple(right), probs)


class Vocab:
    """The per-problem target vocabulary: operators, constants, quantities.

    Column order is fixed: the five operators, the three constants, then
    ``n0 .. n{k-1}``.
    """

    def __init__(self, n_quantities: int, tokens: Sequence[Token] | None = None):
        self.n_quantities = n_quantities
        if tokens is None:
            tokens = (
                [Token(Kind.OP, i) for i in range(len(OPERATORS))]
                + [Token(Kind.CONST, i) for i in range(len(CONSTANTS))]
                + [Token(Kind.QUANT, i) for i in range(n_quantities)]
            )
        self.tokens: tuple[Token, ...] = tuple(tokens)
        for t in self.tokens:
            if t.kind == Kind.QUANT and t.index >= n_quantities:
                raise ValueError(f"{t.symbol} outside the problem's {n_quantities} quantities")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.is_op = np.array([t.is_op for t in self.tokens], dtype=bool)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, tok: Token) -> bool:
        return tok in self._index

    def index(self, tok: Token) -> int:
        return self._index[tok]

    @property
    def operators(self) -> list[Token]:
        return [t for t in self.tokens if t.is_op]

    @property
    def numerics(self) -> list[Token]:
        return [t for t in self.tokens if not t.is_op]

    def restricted(self, tokens: Iterable[Token]) -> "Vocab":
        keep = set(tokens)
        return Vocab(self.n_quantities, [t for t in self.tokens if t in keep])

    def __repr__(self) -> str:
        return "Vocab(" + " ".join(t.symbol for t in self.tokens) + ")"


@dataclass(frozen=True)
class Problem:
    id: str
    words: tuple[str, ...]
    quantities: tuple[float, ...]
    positions: tuple[int, ...]
    answer: float
    gold: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.answer):
            raise ValueError(f"problem {self.id}: answer must be finite")
        if len(self.quantities) != len(self.positions):
            raise ValueError(f"problem {self.id}: one position per quantity")
        if list(self.positions) != sorted(self.positions):
            raise ValueError(f"problem {self.id}: quantities must follow text order")

    @property
    def n_quantities(self) -> int:
        return len(self.quantities)

    @property
    def vocab(self) -> Vocab:
        return Vocab(len(self.quantities))

    def gold_tree(self) -> ExprTree | None:
        return None if self.gold is None else parse_text(self.gold)
