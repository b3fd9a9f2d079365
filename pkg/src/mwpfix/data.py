"""Corpora: Math23K-format loading, quantity extraction, synthetic problems.

Both real and synthetic corpora use one JSON record per problem::

    {"id": "1", "segmented_text": "...", "equation": "x=(100/2)*(2+3.5)", "ans": "275"}

Synthetic records also carry ``"prefix"`` (the generating expression in
prefix notation) and ``"split"``.  A file may be a JSON array, JSON lines,
or concatenated objects (the layout Math23K ships in).
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .expr import (
    CONSTANT_VALUES,
    EvalError,
    ExprTree,
    Leaf,
    Node,
    ParseError,
    Problem,
    Token,
    answers_match,
    const,
    op,
    parse_text,
    quant,
    to_text,
    try_evaluate,
)

log = logging.getLogger(__name__)

_NUM = r"\d+(?:\.\d+)?"
_QUANTITY_RE = re.compile(rf"\({_NUM}/{_NUM}\)|{_NUM}/{_NUM}|{_NUM}%|{_NUM}")


class MalformedRecord(ValueError):
    pass


class UnparsableAnswer(ValueError):
    pass


class GoldParseError(ValueError):
    pass


def parse_number(text: str) -> float:
    """``"3.5"``, ``"15%"`` -> 0.15, ``"(1/5)"`` -> 0.2."""
    s = text.strip()
    if s.startswith("(") and s.endswith(")"):
        s = s[1:-1]
    if s.endswith("%"):
        return float(s[:-1]) / 100.0
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def extract_quantities(tokens: Sequence[str]) -> list[tuple[float, int]]:
    """Numbers in text order as ``(value, token index)``; repeats kept."""
    out = []
    for i, tok in enumerate(tokens):
        for m in _QUANTITY_RE.finditer(tok):
            out.append((parse_number(m.group(0)), i))
    return out


# ---------------------------------------------------------------- equations

_EQ_TOKEN = re.compile(rf"\s*(\({_NUM}/{_NUM}\)|{_NUM}%|{_NUM}|\*\*|[-+*/^()])")
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def _eq_tokens(equation: str) -> list[str]:
    s = equation.strip()
    s = re.sub(r"^\s*[xX]\s*=", "", s)
    s = s.replace("[", "(").replace("]", ")").replace("×", "*").replace("÷", "/")
    out, pos = [], 0
    while pos < len(s):
        if s[pos].isspace():
            pos += 1
            continue
        m = _EQ_TOKEN.match(s, pos)
        if not m:
            raise GoldParseError(f"unexpected text {s[pos:pos + 10]!r} in equation")
        out.append("^" if m.group(1) == "**" else m.group(1))
        pos = m.end()
    return out


def equation_to_tree(equation: str, quantities: Sequence[float]) -> tuple[ExprTree, int]:
    """Parse an infix equation; numbers are mapped to the first quantity with
    that value, else to a constant.  Returns the tree and the number of
    literals that matched neither (those are emitted as quantity index -1
    placeholders and make the tree unusable for seeding)."""
    toks = []
    for t in _eq_tokens(equation):
        # "(a/b)" is one literal only when the text has that fraction
        if t.startswith("(") and "/" in t and not any(
            math.isclose(q, parse_number(t), rel_tol=1e-9) for q in quantities
        ):
            a, b = t[1:-1].split("/")
            toks.extend(["(", a, "/", b, ")"])
        else:
            toks.append(t)
    output: list[list] = []  # postfix items
    stack: list[str] = []
    prev = None
    for t in toks:
        if t == "(":
            stack.append(t)
        elif t == ")":
            while stack and stack[-1] != "(":
                output.append(stack.pop())
            if not stack:
                raise GoldParseError("unbalanced parentheses")
            stack.pop()
        elif t in _PREC:
            if t == "-" and (prev is None or prev in _PREC or prev == "("):
                output.append(0.0)  # unary minus as 0 - x
            while stack and stack[-1] != "(" and (
                _PREC[stack[-1]] > _PREC[t] or (_PREC[stack[-1]] == _PREC[t] and t != "^")
            ):
                output.append(stack.pop())
            stack.append(t)
        else:
            output.append(parse_number(t))
        prev = t
    while stack:
        t = stack.pop()
        if t == "(":
            raise GoldParseError("unbalanced parentheses")
        output.append(t)

    missing = 0

    def leaf(v: float) -> ExprTree:
        nonlocal missing
        for i, q in enumerate(quantities):
            if math.isclose(q, v, rel_tol=1e-9, abs_tol=1e-12):
                return Leaf(quant(i))
        for sym, cv in CONSTANT_VALUES.items():
            if math.isclose(cv, v, rel_tol=1e-9) or (sym == "pi" and math.isclose(v, 3.14)):
                return Leaf(const(sym))
        missing += 1
        return _Orphan(v)

    st: list[ExprTree] = []
    for item in output:
        if isinstance(item, str):
            if len(st) < 2:
                raise GoldParseError("operator without operands")
            b, a = st.pop(), st.pop()
            st.append(Node(op(item), a, b))
        else:
            st.append(leaf(item))
    if len(st) != 1:
        raise GoldParseError("equation is not a single expression")
    return st[0], missing


@dataclass(frozen=True)
class _Orphan:
    """A literal absent from the text and from the constants."""

    value: float
    size: int = 1


def expression_size(tree) -> int:
    return tree.size


# ---------------------------------------------------------------- corpus


@dataclass
class Corpus:
    problems: list[Problem]
    split: dict[str, str] = field(default_factory=dict)
    provenance: str = "synthetic"
    stats: dict[str, int] = field(default_factory=dict)
    # (n quantities, gold token count) for every equation the loader parsed
    gold_sizes: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.problems]
        if len(set(ids)) != len(ids):
            raise ValueError("problem ids must be unique")

    def __len__(self) -> int:
        return len(self.problems)

    def part(self, name: str) -> list[Problem]:
        return [p for p in self.problems if self.split.get(p.id, "train") == name]

    @property
    def train(self) -> list[Problem]:
        return self.part("train")

    @property
    def test(self) -> list[Problem]:
        return self.part("test")

    def resplit(self, test_fraction: float = 0.2, seed: int = 0) -> "Corpus":
        order = np.random.default_rng(seed).permutation(len(self.problems))
        n_test = int(round(test_fraction * len(self.problems)))
        split = {}
        for rank, i in enumerate(order):
            split[self.problems[i].id] = "test" if rank < n_test else "train"
        return Corpus(self.problems, split, self.provenance, dict(self.stats))

    def folds(self, k: int = 5, seed: int = 0) -> Iterator["Corpus"]:
        order = np.random.default_rng(seed).permutation(len(self.problems))
        for f in range(k):
            test_ids = {self.problems[i].id for i in order[f::k]}
            yield Corpus(
                self.problems,
                {p.id: "test" if p.id in test_ids else "train" for p in self.problems},
                self.provenance,
            )

    def records(self) -> list[dict]:
        out = []
        for p in self.problems:
            rec = {
                "id": p.id,
                "segmented_text": " ".join(p.words),
                "equation": "x=" + _infix_numbers(p) if p.gold else "",
                "ans": _fmt(p.answer),
            }
            if p.gold:
                rec["prefix"] = p.gold
            if p.id in self.split:
                rec["split"] = self.split[p.id]
            out.append(rec)
        return out

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.records(), indent=1, ensure_ascii=False)
        Path(path).write_text(text + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def _infix_numbers(p: Problem) -> str:
    def rec(t: ExprTree) -> str:
        if isinstance(t, Leaf):
            tok = t.token
            if tok.kind.name == "QUANT":
                return _fmt(p.quantities[tok.index])
            return {"1": "1", "2": "2", "pi": "3.14"}[tok.symbol]
        return f"({rec(t.left)}{t.op.symbol}{rec(t.right)})"

    s = rec(parse_text(p.gold))
    return s[1:-1] if s.startswith("(") and s.endswith(")") else s


def _iter_json_records(text: str) -> Iterator:
    text = text.strip()
    if not text:
        return
    if text[0] == "[":
        yield from json.loads(text)
        return
    dec = json.JSONDecoder()
    pos = 0
    while pos < len(text):
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        try:
            obj, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError:
            # skip to the next line and keep going
            nl = text.find("\n", pos)
            yield None
            if nl < 0:
                break
            pos = nl + 1
            continue
        yield obj


def load_math23k(path: str | Path, provenance: str | None = None) -> Corpus:
    """Read a Math23K-format file into a weak-supervision corpus.

    Malformed records and unparsable answers are skipped and counted in
    ``corpus.stats``.  Gold equations are kept only when every literal maps
    to a quantity or constant and the tree executes to the stated answer.
    """
    text = Path(path).read_text(encoding="utf-8")
    stats = {"records": 0, "malformed": 0, "unparsable_answer": 0, "no_quantities": 0,
             "gold_missing_numbers": 0, "gold_parse_error": 0, "gold_answer_mismatch": 0}
    problems: list[Problem] = []
    split: dict[str, str] = {}
    seen: set[str] = set()
    gold_sizes: list[tuple[int, int]] = []
    for rec in _iter_json_records(text):
        stats["records"] += 1
        if not isinstance(rec, dict) or "segmented_text" not in rec and "text" not in rec:
            stats["malformed"] += 1
            continue
        pid = str(rec.get("id", stats["records"]))
        words = str(rec.get("segmented_text", rec.get("text", ""))).split()
        if not words or pid in seen:
            stats["malformed"] += 1
            continue
        try:
            ans = parse_number(str(rec.get("ans", rec.get("answer", ""))))
            if not math.isfinite(ans):
                raise ValueError
        except (ValueError, ZeroDivisionError):
            stats["unparsable_answer"] += 1
            continue
        qs = extract_quantities(words)
        if not qs:
            stats["no_quantities"] += 1
            continue
        values = tuple(v for v, _ in qs)
        positions = tuple(i for _, i in qs)
        gold = rec.get("prefix")
        if gold is None and rec.get("equation"):
            try:
                tree, missing = equation_to_tree(str(rec["equation"]), values)
                gold_sizes.append((len(values), tree.size))
                if missing:
                    stats["gold_missing_numbers"] += 1
                elif not answers_match(try_evaluate(tree, values), ans):
                    stats["gold_answer_mismatch"] += 1
                else:
                    gold = to_text(tree)
            except (GoldParseError, ParseError, EvalError, ValueError, ZeroDivisionError):
                stats["gold_parse_error"] += 1
        elif gold is not None:
            gold_sizes.append((len(values), parse_text(gold).size))
        seen.add(pid)
        problems.append(Problem(pid, tuple(words), values, positions, ans, gold))
        if "split" in rec:
            split[pid] = rec["split"]
    if not problems:
        log.warning("no problems loaded from %s", path)
    stats["loaded"] = len(problems)
    return Corpus(problems, split, provenance or ("synthetic" if split else "math23k"), stats, gold_sizes)


def size_prior_coverage(gold_sizes: Sequence[tuple[int, int]], lo=(2, -1), hi=(2, 3)) -> float:
    """Fraction of gold expressions whose token count lies in the prior range."""
    if not gold_sizes:
        return float("nan")
    inside = sum(lo[0] * n + lo[1] <= s <= hi[0] * n + hi[1] for n, s in gold_sizes)
    return inside / len(gold_sizes)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticTemplate:
    """Problem text with ``{a}``-style slots and the generating expression.

    ``expr`` is prefix notation over slot names and constants;
    ``ranges`` gives inclusive integer ranges per slot.  A slot range may
    reference earlier slots through ``derive`` (slot -> prefix expression
    over earlier slots), used to keep divisions exact.
    """

    name: str
    text: str
    expr: str
    ranges: dict
    derive: dict = field(default_factory=dict)

    @property
    def slots(self) -> list[str]:
        """Quantity slots in text order (filler words excluded)."""
        known = set(self.ranges) | set(self.derive)
        return [s for s in re.findall(r"\{(\w+)\}", self.text) if s in known]

    def gold_prefix(self) -> str:
        order = self.slots
        return " ".join(f"n{order.index(t)}" if t in order else t for t in self.expr.split())

    def instantiate(self, rng: np.random.Generator, fillers: dict) -> tuple[list[str], dict]:
        vals: dict[str, float] = {}
        for slot, (lo, hi) in self.ranges.items():
            vals[slot] = float(rng.integers(lo, hi + 1))
        for slot, expr in self.derive.items():
            vals[slot] = _eval_slots(expr, vals)
        text = self.text
        for key, choices in fillers.items():
            if "{" + key + "}" in text:
                text = text.replace("{" + key + "}", choices[int(rng.integers(len(choices)))])
        words = []
        for w in text.split():
            m = re.fullmatch(r"\{(\w+)\}", w)
            words.append(_fmt(vals[m.group(1)]) if m and m.group(1) in vals else w)
        return words, vals


def _eval_slots(expr: str, vals: dict) -> float:
    from .expr import evaluate

    names = sorted(vals)
    tokens = [f"n{names.index(t)}" if t in vals else t for t in expr.split()]
    return evaluate(parse_text(" ".join(tokens)), [vals[k] for k in names])


FILLERS = {
    "name": ["tom", "lily", "amy", "jack", "mike", "lucy", "sam", "nina"],
    "item": ["pens", "books", "cups", "toys", "balls", "kites"],
    "fruit": ["apples", "pears", "peaches", "oranges"],
    "vehicle": ["car", "train", "bus", "truck"],
}

TEMPLATES: tuple[SyntheticTemplate, ...] = (
    SyntheticTemplate(
        "journey",
        "a {vehicle} travels {a} km in {b} hours . at the same speed it drives {c} more hours . "
        "how many km does it travel in all ?",
        "* / a b + b c",
        {"s": (20, 90), "b": (2, 6), "c": (1, 5)},
        {"a": "* s b"},
    ),
    SyntheticTemplate(
        "change",
        "each of the {item} costs {a} yuan . {name} buys {b} of them and pays {c} yuan . "
        "how much change does {name} get ?",
        "- c * a b",
        {"a": (2, 9), "b": (2, 9), "c": (100, 200)},
    ),
    SyntheticTemplate(
        "share",
        "{name} has {a} {fruit} and shares them equally among {b} friends . "
        "how many {fruit} does each friend get ?",
        "/ a b",
        {"q": (3, 15), "b": (2, 9)},
        {"a": "* q b"},
    ),
    SyntheticTemplate(
        "fence",
        "a garden is {a} m long and {b} m wide . {name} puts a fence around it . "
        "how long is the fence ?",
        "* 2 + a b",
        {"a": (10, 60), "b": (3, 30)},
    ),
    SyntheticTemplate(
        "reading",
        "a book has {a} pages . {name} reads {b} pages every day for {c} days . "
        "how many pages are left to read ?",
        "- a * b c",
        {"a": (200, 400), "b": (10, 30), "c": (2, 6)},
    ),
)


def gen_synthetic(
    n_problems: int = 200,
    templates: Sequence[SyntheticTemplate] = TEMPLATES,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> Corpus:
    """Deterministic corpus: problems cycle through the templates."""
    rng = np.random.default_rng(seed)
    problems = []
    for k in range(n_problems):
        tpl = templates[k % len(templates)]
        words, vals = tpl.instantiate(rng, FILLERS)
        qs = extract_quantities(words)
        slot_order = tpl.slots
        quantities = tuple(vals[s] for s in slot_order)
        assert tuple(v for v, _ in qs) == quantities, (words, quantities)
        gold = tpl.gold_prefix()
        answer = try_evaluate(parse_text(gold), quantities)
        if answer is None:
            raise ValueError(f"template {tpl.name} produced an invalid problem")
        problems.append(
            Problem(f"syn-{k:04d}", tuple(words), quantities, tuple(i for _, i in qs), answer, gold)
        )
    corpus = Corpus(problems, provenance="synthetic")
    return corpus.resplit(test_fraction, seed) if test_fraction > 0 else corpus


SHIPPED = {"synthetic200": Path(__file__).parent / "corpora" / "synthetic200.json"}


def load_shipped(name: str = "synthetic200") -> Corpus:
    """Load a corpus bundled with the package."""
    if name not in SHIPPED:
        raise KeyError(f"no shipped corpus named {name!r}; have {sorted(SHIPPED)}")
    return load_math23k(SHIPPED[name], provenance="synthetic")


def vocab_tokens(problem: Problem) -> list[Token]:
    return list(problem.vocab.tokens)
