"""Weakly supervised math word problem solving by fixing wrong expressions."""
from .expr import Problem, Vocab, answers_match, evaluate, parse_prefix, parse_text, to_prefix, to_text
from .fixer import m_fix, one_fix
from .tree_reg import SizePrior

__version__ = "0.1.0"

__all__ = [
    "Problem",
    "SizePrior",
    "Vocab",
    "answers_match",
    "evaluate",
    "m_fix",
    "one_fix",
    "parse_prefix",
    "parse_text",
    "to_prefix",
    "to_text",
]
