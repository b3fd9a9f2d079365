import math

import numpy as np
import pytest

from mwpfix.expr import Problem, parse_prefix, parse_text, to_prefix, tree_size
from mwpfix.policy import NUM, Policy, build_word_index
from mwpfix.tree_reg import mask_walk

P = Problem("t", ("a", "has", "3", "apples", "and", "5", "pears", "?"), (3.0, 5.0), (2, 5), 15.0)


def finite_difference_check(pol, problem, trees, weights, eps=1e-4):
    """Worst relative error between analytic and central-difference gradients, per block."""
    _, grads = pol.loss_and_grads(problem, trees, weights)
    worst = {}
    for name, v in pol.params.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + eps
            hi, _ = pol.loss_and_grads(problem, trees, weights)
            v[idx] = old - eps
            lo, _ = pol.loss_and_grads(problem, trees, weights)
            v[idx] = old
            fd[idx] = (hi - lo) / (2 * eps)
        denom = max(np.linalg.norm(fd) + np.linalg.norm(grads[name]), 1e-12)
        worst[name] = np.linalg.norm(fd - grads[name]) / denom
    return worst


@pytest.fixture(scope="module")
def pol():
    return Policy.create(build_word_index([P]), d=8, seed=0, scale=0.3)


def test_word_index_maps_numbers():
    words = build_word_index([P])
    assert words[NUM] == 2
    assert "3" not in words and "apples" in words
    ids = Policy.create(words, d=4).word_ids(P)
    assert ids[2] == ids[5] == words[NUM]


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    pol = Policy.create(build_word_index([P]), d=4, seed=seed, scale=0.5)
    trees = [parse_text("* n0 n1"), parse_text("+ n0 * n1 2"), parse_text("- * n1 n0 + pi n0")]
    worst = finite_difference_check(pol, P, trees, [1.0, 0.5, 2.0])
    assert max(worst.values()) <= 1e-4, worst


def test_loss_is_weighted_nll(pol):
    trees = [parse_text("* n0 n1"), parse_text("+ n0 n1")]
    loss, _ = pol.loss_and_grads(P, trees, [2.0, 0.5])
    expected = -2.0 * pol.sequence_logprob(P, to_prefix(trees[0])) - 0.5 * pol.sequence_logprob(P, to_prefix(trees[1]))
    assert loss == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("size", [1, 3, 5, 7, 9])
def test_decodes_have_exact_size(pol, size):
    rng = np.random.default_rng(size)
    for mode in ("greedy", "sample", "beam"):
        for tr in pol.decode(P, size, mode, rng=rng, width=3):
            assert tree_size(parse_prefix(tr.tokens)) == size


def test_distributions_are_masked(pol):
    dists = pol.token_distributions(P, to_prefix(parse_text("+ n0 * n1 2")))
    vocab = P.vocab
    assert np.allclose(dists.sum(axis=1), 1.0)
    # first position of a size-5 tree must be an operator
    assert dists[0][~vocab.is_op].sum() == 0
    # last position must be a numeric
    assert dists[-1][vocab.is_op].sum() == 0


def test_beam_matches_exhaustive_ranking():
    # width larger than the space: beam must return every sequence in exact order
    p = Problem("s", ("x", "1", "y"), (1.0,), (1,), 2.0)
    pol = Policy.create(build_word_index([p]), d=6, seed=3, scale=0.5)
    seqs = list(mask_walk(p.vocab, 3))
    scored = sorted(((pol.sequence_logprob(p, s), s) for s in seqs), key=lambda x: (-x[0], x[1]))
    beam = pol.decode(p, 3, "beam", width=len(seqs))
    assert [b.tokens for b in beam] == [s for _, s in scored]
    for b, (lp, _) in zip(beam, scored):
        assert b.logprob == pytest.approx(lp, abs=1e-9)


def test_beam_top_is_at_least_greedy(pol):
    g = pol.decode(P, 5, "greedy")[0]
    b = pol.decode(P, 5, "beam", width=5)[0]
    assert b.logprob >= g.logprob - 1e-12


def test_greedy_logprob_consistent(pol):
    tr = pol.decode(P, 7, "greedy")[0]
    assert tr.logprob == pytest.approx(pol.sequence_logprob(P, tr.tokens), abs=1e-9)
    assert math.isfinite(tr.logprob)


def test_sampling_is_seeded(pol):
    a = pol.decode(P, 7, "sample", rng=np.random.default_rng(5))[0]
    b = pol.decode(P, 7, "sample", rng=np.random.default_rng(5))[0]
    assert a.tokens == b.tokens
    with pytest.raises(ValueError):
        pol.decode(P, 7, "sample")


def test_checkpoint_round_trip(pol, tmp_path):
    path = tmp_path / "p.npz"
    pol.save(path)
    back = Policy.load(path)
    assert back.words == pol.words
    for k in pol.params:
        assert np.array_equal(back.params[k], pol.params[k])
    assert back.decode(P, 5, "beam")[0].tokens == pol.decode(P, 5, "beam")[0].tokens


def test_unknown_words_map_to_unk(pol):
    other = Problem("o", ("zebra", "7"), (7.0,), (1,), 7.0)
    ids = pol.word_ids(other)
    assert ids[0] == 1
