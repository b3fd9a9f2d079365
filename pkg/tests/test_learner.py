import math

import numpy as np
import pytest

from mwpfix.data import gen_synthetic
from mwpfix.expr import Problem, answers_match, parse_text, to_prefix, to_text, try_evaluate
from mwpfix.learner import MemoryBuffer, Optimizer, TrainConfig, Trainer, init_buffers_fully, lbf_epoch

P = Problem("p", ("a", "3", "b", "5", "c"), (3.0, 5.0), (1, 3), 15.0, "* n0 n1")


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(20, seed=1, test_fraction=0.0).problems


def test_buffer_rejects_wrong_trees():
    buf = MemoryBuffer()
    assert not buf.add(P, parse_text("+ n0 n1"))
    assert buf.rejected == 1 and P.id not in buf
    assert buf.add(P, parse_text("* n0 n1"))
    assert not buf.add(P, parse_text("* n0 n1"))
    assert buf.add(P, parse_text("* n1 n0"))
    assert buf[P.id] == ["* n0 n1", "* n1 n0"]
    assert buf.verify({P.id: P}) == 0
    assert buf.dump() == "p\t* n0 n1\np\t* n1 n0\n"


def test_capacity_one_keeps_newest():
    buf = MemoryBuffer(capacity=1)
    buf.add(P, parse_text("* n0 n1"))
    buf.add(P, parse_text("* n1 n0"))
    assert buf[P.id] == ["* n1 n0"]


def test_init_fully_uses_gold():
    buf = MemoryBuffer()
    bad = Problem("q", ("x", "2"), (2.0,), (1,), 9.0, "+ n0 n0")
    stats = init_buffers_fully([P, bad], buf)
    assert stats["seeded"] == 1 and stats["answer_mismatch"] == 1
    assert buf[P.id] == ["* n0 n1"]


def test_sgd_step_and_clipping():
    params = {"w": np.zeros(2)}
    opt = Optimizer(params, "sgd", lr=0.1, clip=5.0)
    norm = opt.step({"w": np.array([30.0, 40.0])})
    assert norm == 50.0
    assert np.allclose(params["w"], [-0.3, -0.4])


def test_adam_first_step_is_lr_sized():
    params = {"w": np.zeros(3)}
    opt = Optimizer(params, "adam", lr=0.01, clip=0)
    opt.step({"w": np.array([1.0, -2.0, 0.5])})
    assert np.allclose(params["w"], [-0.01, 0.01, -0.01], atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strategy="nope")
    with pytest.raises(ValueError):
        TrainConfig(m=0)
    assert TrainConfig(prior={"a_min": 2, "b_min": 1, "a_max": 2, "b_max": 3}).prior.b_min == 1


def test_reinforce_baseline_is_running_mean():
    tr = Trainer([P], TrainConfig(strategy="REINFORCE", d=8))
    assert tr._advantage(1.0) == 1.0
    assert tr.baseline == pytest.approx(0.1)
    assert tr._advantage(0.0) == pytest.approx(-0.1)
    assert tr.baseline == pytest.approx(0.09)


def test_mapo_mass_is_clipped():
    tr = Trainer([P], TrainConfig(strategy="MAPO", d=8, mapo_clip=0.1))
    assert tr.mapo_weights(P) == ([], 0.0)
    tr.buffers.add(P, parse_text("* n0 n1"))
    trees, w = tr.mapo_weights(P)
    mass = math.exp(tr.policy.sequence_logprob(P, to_prefix(trees[0])))
    assert mass < 0.1
    assert w == 0.1


def test_lbf_step_only_stores_verified(small):
    tr = Trainer(small, TrainConfig(strategy="LBF", d=16, m=20, optimizer="adam", lr=0.003))
    for p in small:
        tr.lbf_step(p)
    assert tr.counters.fixes_found > 0
    assert tr.buffers.verify(tr.by_id) == 0
    assert tr.counters.unverified_supervised_updates == 0
    for pid in tr.buffers.ids():
        for t in tr.buffers.trees(pid):
            assert answers_match(try_evaluate(t, tr.by_id[pid].quantities), tr.by_id[pid].answer)


@pytest.mark.parametrize("strategy", ["LBF", "LBF-no-memory", "REINFORCE", "MAPO", "LBF-fully"])
def test_epoch_row_and_determinism(small, strategy):
    cfg = TrainConfig(strategy=strategy, d=8, m=5, epochs=2, optimizer="adam", lr=0.003, seed=4)
    a = Trainer(small, cfg).train()
    b = Trainer(small, cfg).train()
    assert a == b
    assert set(a[0]) == {"epoch", "strategy", "train_acc", "fixes_found", "mean_buffer_size", "loss"}
    assert 0.0 <= a[-1]["train_acc"] <= 1.0
    if strategy == "LBF-no-memory":
        assert all(r["mean_buffer_size"] <= 1.0 for r in a)
    if strategy in ("REINFORCE", "MAPO"):
        assert all(r["fixes_found"] == 0 for r in a)


def test_lbf_epoch_keeps_optimizer_state(small):
    cfg = TrainConfig(strategy="LBF", d=8, m=5, optimizer="adam", lr=0.003)
    tr = Trainer(small, cfg)
    rng = np.random.default_rng(0)
    lbf_epoch(small, tr.buffers, tr.policy, cfg, rng, tr.opt)
    t1 = tr.opt.t
    lbf_epoch(small, tr.buffers, tr.policy, cfg, rng, tr.opt)
    assert tr.opt.t > t1 > 0


def test_fully_mode_lowers_gold_nll(small):
    cfg = TrainConfig(strategy="LBF-fully", d=16, m=5, epochs=3, optimizer="adam", lr=0.01)
    tr = Trainer(small, cfg)

    def nll():
        return -sum(tr.policy.sequence_logprob(p, to_prefix(parse_text(p.gold))) for p in small)

    before = nll()
    tr.train()
    assert nll() < 0.8 * before


def test_accumulation_sums_before_update():
    params = {"w": np.zeros(2)}
    opt = Optimizer(params, "sgd", lr=0.1, clip=0, accumulate=2)
    assert opt.step({"w": np.array([1.0, 0.0])}) is None
    assert np.all(params["w"] == 0)
    opt.step({"w": np.array([0.0, 1.0])})
    assert np.allclose(params["w"], [-0.1, -0.1])
    opt.step({"w": np.array([1.0, 1.0])})
    opt.flush()
    assert np.allclose(params["w"], [-0.2, -0.2])
    assert opt.flush() is None


def test_batched_training_runs(small):
    cfg = TrainConfig(strategy="LBF", d=8, m=5, epochs=1, batch_size=4, optimizer="adam", lr=0.003)
    tr = Trainer(small, cfg)
    tr.train()
    # one update per four supervised steps, plus the flush at the end of the epoch
    assert tr.opt.t == math.ceil(tr.counters.supervised_updates / 4)
