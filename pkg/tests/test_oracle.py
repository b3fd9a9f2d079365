import collections

import pytest

from mwpfix.expr import EvalError, Problem, Vocab, answers_match, evaluate, op, quant, to_text, tree_size
from mwpfix.oracle import count_solutions_by_enumeration, oracle_solutions, postfix_evaluate, single_substitutions
from mwpfix.tree_reg import SizeTooLarge, enumerate_trees

GOLDEN = Problem("golden", tuple("abc"), (100.0, 2.0, 3.5), (0, 1, 2), 275.0)


def test_golden_solution_counts():
    sols = oracle_solutions(GOLDEN, (5, 9))
    by_size = collections.Counter(tree_size(t) for t in sols)
    assert by_size == {7: 104, 9: 3876}
    texts = {to_text(t) for t in sols}
    assert "* / n0 n1 + n1 n2" in texts
    assert "+ n0 * / n0 n1 n2" in texts


@pytest.mark.parametrize("size", [5, 7])
def test_vectorized_matches_sequence_walk(size):
    assert len(oracle_solutions(GOLDEN, size)) == count_solutions_by_enumeration(GOLDEN, size, GOLDEN.vocab)


def test_small_vocab_matches_plain_enumeration():
    p = Problem("p", ("a", "b"), (3.0, 5.0), (0, 1), 2.0)
    vocab = Vocab(2).restricted([op("+"), op("-"), op("*"), op("/"), quant(0), quant(1)])
    for size in (1, 3, 5, 7):
        fast = {to_text(t) for t in oracle_solutions(p, size, vocab)}
        slow = set()
        for t in enumerate_trees(vocab, size):
            try:
                if answers_match(evaluate(t, p.quantities), p.answer):
                    slow.add(to_text(t))
            except EvalError:
                pass
        assert fast == slow


def test_oracle_limits():
    with pytest.raises(SizeTooLarge):
        oracle_solutions(GOLDEN, 11)
    big = Problem("b", tuple("abcdef"), (1.0,) * 6, tuple(range(6)), 1.0)
    with pytest.raises(SizeTooLarge):
        oracle_solutions(big, 3)


def test_single_substitutions_count():
    vocab = Vocab(2)
    subs = single_substitutions([op("+"), quant(0), quant(1)], vocab)
    # 4 other operators + 4 other numerics at each of two leaves
    assert len(subs) == 4 + 4 + 4


def test_postfix_rejects_malformed():
    with pytest.raises(ValueError):
        postfix_evaluate([op("+"), quant(0)], [1.0])
