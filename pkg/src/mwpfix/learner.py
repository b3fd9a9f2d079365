"""Training strategies on (problem, answer) pairs.

* ``LBF``: decode, repair with :func:`fixer.m_fix`, store verified fixes in
  a per-problem memory buffer and minimize the buffer's negative
  log-likelihood.
* ``LBF-no-memory``: same, but the buffer keeps only the latest fix.
* ``LBF-fully``: buffers start with the gold expressions.
* ``REINFORCE`` and ``MAPO``: likelihood-ratio baselines under the same
  size masks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import ExprTree, Problem, answers_match, parse_text, to_prefix, to_text, try_evaluate
from .fixer import m_fix
from .policy import Policy, build_word_index
from .tree_reg import SizePrior

log = logging.getLogger(__name__)

STRATEGIES = ("LBF", "LBF-no-memory", "REINFORCE", "MAPO", "LBF-fully")


@dataclass
class TrainConfig:
    strategy: str = "LBF"
    epochs: int = 20
    m: int = 50
    prior: SizePrior = field(default_factory=SizePrior)
    seed: int = 0
    lr: float = 0.01
    optimizer: str = "sgd"
    clip: float = 5.0
    d: int = 64
    init_scale: float = 0.08
    beam_width: int = 5
    mapo_clip: float = 0.1
    explore: str = "greedy"
    loss_reduction: str = "sum"
    baseline_decay: float = 0.9
    batch_size: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.explore not in ("greedy", "sample"):
            raise ValueError(f"unknown exploration mode {self.explore!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown loss reduction {self.loss_reduction!r}")
        if isinstance(self.prior, dict):
            self.prior = SizePrior(**self.prior)

    def as_dict(self) -> dict:
        return asdict(self)


class MemoryBuffer:
    """Verified, duplicate-free solutions per problem, in insertion order."""

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self._items: dict[str, list[str]] = {}
        self.rejected = 0

    def __getitem__(self, pid: str) -> list[str]:
        return self._items.get(pid, [])

    def __contains__(self, pid: str) -> bool:
        return bool(self._items.get(pid))

    def ids(self) -> list[str]:
        return list(self._items)

    def add(self, problem: Problem, tree: ExprTree) -> bool:
        """Insert after checking the tree executes to the answer.

        With capacity 1 the newest fix replaces the old one.  Returns True
        when the buffer changed.
        """
        if not answers_match(try_evaluate(tree, problem.quantities), problem.answer):
            self.rejected += 1
            return False
        key = to_text(tree)
        items = self._items.setdefault(problem.id, [])
        if key in items:
            return False
        if self.capacity is not None and len(items) >= self.capacity:
            del items[: len(items) - self.capacity + 1]
        items.append(key)
        return True

    def trees(self, pid: str) -> list[ExprTree]:
        return [parse_text(s) for s in self[pid]]

    def sizes(self, pids: Sequence[str]) -> list[int]:
        return [len(self[p]) for p in pids]

    def dump(self) -> str:
        lines = []
        for pid in sorted(self._items):
            for s in self._items[pid]:
                lines.append(f"{pid}\t{s}")
        return "\n".join(lines) + ("\n" if lines else "")

    def verify(self, problems: dict[str, Problem]) -> int:
        """Number of stored entries that do not execute to their answer."""
        bad = 0
        for pid, items in self._items.items():
            p = problems[pid]
            for s in items:
                if not answers_match(try_evaluate(parse_text(s), p.quantities), p.answer):
                    bad += 1
        return bad


class Optimizer:
    """SGD or Adam with global gradient-norm clipping."""

    def __init__(self, params: dict[str, np.ndarray], kind: str = "sgd", lr: float = 0.01,
                 clip: float = 5.0, betas=(0.9, 0.999), eps: float = 1e-8, accumulate: int = 1):
        self.params = params
        # sum this many gradients before each update (mini-batching)
        self.accumulate = accumulate
        self._pending: dict[str, np.ndarray] | None = None
        self._n_pending = 0
        self.kind = kind
        self.lr = lr
        self.clip = clip
        self.betas = betas
        self.eps = eps
        self.t = 0
        if kind == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float | None:
        """Apply (or, when accumulating, queue) one gradient.

        Returns the pre-clipping norm of the applied gradient, or None
        while a batch is still filling.
        """
        if self.accumulate <= 1:
            return self._apply(grads)
        if self._pending is None:
            self._pending = {k: g.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                self._pending[k] += g
        self._n_pending += 1
        if self._n_pending >= self.accumulate:
            return self.flush()
        return None

    def flush(self) -> float | None:
        if self._pending is None:
            return None
        grads, self._pending, self._n_pending = self._pending, None, 0
        return self._apply(grads)

    def _apply(self, grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        if self.kind == "sgd":
            for k, g in grads.items():
                self.params[k] -= self.lr * scale * g
        else:
            b1, b2 = self.betas
            c1 = 1 - b1**self.t
            c2 = 1 - b2**self.t
            for k, g in grads.items():
                g = g * scale
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


@dataclass
class Counters:
    fixes_found: int = 0
    buffer_inserts: int = 0
    supervised_updates: int = 0
    unverified_supervised_updates: int = 0
    likelihood_ratio_updates: int = 0
    rewarding_samples: int = 0


def init_buffers_fully(problems: Sequence[Problem], buffers: MemoryBuffer) -> dict[str, int]:
    """Seed each buffer with the problem's gold tree (LBF-fully mode)."""
    stats = {"seeded": 0, "no_gold": 0, "gold_parse_error": 0, "answer_mismatch": 0}
    for p in problems:
        if p.gold is None:
            stats["no_gold"] += 1
            continue
        try:
            tree = parse_text(p.gold)
        except ValueError:
            stats["gold_parse_error"] += 1
            log.warning("problem %s: cannot parse gold %r", p.id, p.gold)
            continue
        if not answers_match(try_evaluate(tree, p.quantities), p.answer):
            stats["answer_mismatch"] += 1
            log.warning("problem %s: gold does not execute to the answer", p.id)
            continue
        buffers.add(p, tree)
        stats["seeded"] += 1
    return stats


def best_greedy(policy: Policy, problem: Problem, prior: SizePrior, enc=None):
    """Greedy decode at every admissible size; keep the most probable."""
    enc = enc or policy.encode(problem)
    best = None
    for l in prior.sizes(problem.n_quantities):
        tr = policy.decode(problem, l, "greedy", enc=enc)[0]
        if best is None or (-tr.logprob, tr.tokens) < (-best.logprob, best.tokens):
            best = tr
    return best


def answer_accuracy(policy: Policy, problems: Sequence[Problem], prior: SizePrior) -> float:
    if not problems:
        return 0.0
    hits = 0
    for p in problems:
        tr = best_greedy(policy, p, prior)
        hits += answers_match(try_evaluate(parse_text(tr.text), p.quantities), p.answer)
    return hits / len(problems)


class Trainer:
    """Runs one strategy over a training set, one gradient step per problem."""

    def __init__(self, problems: Sequence[Problem], config: TrainConfig,
                 policy: Policy | None = None, words: dict[str, int] | None = None):
        self.problems = list(problems)
        self.by_id = {p.id: p for p in self.problems}
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.policy = policy or Policy.create(
            words or build_word_index(self.problems), d=config.d, seed=config.seed,
            scale=config.init_scale,
        )
        self.opt = Optimizer(self.policy.params, config.optimizer, config.lr, config.clip,
                             accumulate=config.batch_size)
        capacity = 1 if config.strategy == "LBF-no-memory" else None
        self.buffers = MemoryBuffer(capacity)
        self.counters = Counters()
        self.baseline = 0.0
        self.epoch = 0
        if config.strategy == "LBF-fully":
            self.seed_stats = init_buffers_fully(self.problems, self.buffers)

    # -------------------------------------------------------------- helpers

    def _sample_size(self, p: Problem) -> int:
        sizes = self.config.prior.sizes(p.n_quantities)
        return int(sizes[int(self.rng.integers(len(sizes)))])

    def _buffer_step(self, p: Problem) -> float | None:
        trees = self.buffers.trees(p.id)
        if not trees:
            return None
        for t in trees:
            if not answers_match(try_evaluate(t, p.quantities), p.answer):
                self.counters.unverified_supervised_updates += 1
        w = 1.0 / len(trees) if self.config.loss_reduction == "mean" else 1.0
        loss, grads = self.policy.loss_and_grads(p, trees, [w] * len(trees))
        self.opt.step(grads)
        self.counters.supervised_updates += 1
        return loss

    # -------------------------------------------------------------- strategies

    def lbf_step(self, p: Problem) -> float | None:
        cfg = self.config
        enc = self.policy.encode(p)
        l = self._sample_size(p)
        mode = "sample" if cfg.explore == "sample" else "greedy"
        trace = self.policy.decode(p, l, mode, rng=self.rng, enc=enc)[0]

        def prob_fn(tokens):
            return self.policy.token_distributions(p, tokens, enc=enc)

        fix = m_fix(list(trace.tokens), p, m=cfg.m, prob_fn=prob_fn, rng=self.rng)
        if fix is not None:
            self.counters.fixes_found += 1
            if self.buffers.add(p, fix.tree):
                self.counters.buffer_inserts += 1
        return self._buffer_step(p)

    def _sample(self, p: Problem):
        l = self._sample_size(p)
        trace = self.policy.decode(p, l, "sample", rng=self.rng)[0]
        tree = parse_text(trace.text)
        reward = 1.0 if answers_match(try_evaluate(tree, p.quantities), p.answer) else 0.0
        self.counters.rewarding_samples += int(reward)
        return tree, reward

    def _advantage(self, reward: float) -> float:
        adv = reward - self.baseline
        d = self.config.baseline_decay
        self.baseline = d * self.baseline + (1 - d) * reward
        return adv

    def reinforce_step(self, p: Problem) -> float | None:
        tree, reward = self._sample(p)
        adv = self._advantage(reward)
        if adv == 0.0:
            return None
        loss, grads = self.policy.loss_and_grads(p, [tree], [adv])
        self.opt.step(grads)
        self.counters.likelihood_ratio_updates += 1
        return loss

    def mapo_weights(self, p: Problem) -> tuple[list[ExprTree], float]:
        """Buffer trees and the clipped buffer mass used to weight them."""
        trees = self.buffers.trees(p.id)
        if not trees:
            return [], 0.0
        enc = self.policy.encode(p)
        mass = sum(math.exp(self.policy.sequence_logprob(p, to_prefix(t), enc)) for t in trees)
        return trees, min(1.0, max(mass, self.config.mapo_clip))

    def mapo_step(self, p: Problem) -> float | None:
        trees, w_buf = self.mapo_weights(p)
        tree, reward = self._sample(p)
        outside = to_text(tree) not in self.buffers[p.id]
        adv = self._advantage(reward) if outside else 0.0
        batch, weights = [], []
        for t in trees:
            batch.append(t)
            weights.append(w_buf / len(trees))
        if outside and adv != 0.0:
            batch.append(tree)
            weights.append((1.0 - w_buf) * adv)
        loss = None
        if batch and any(w != 0.0 for w in weights):
            loss, grads = self.policy.loss_and_grads(p, batch, weights)
            self.opt.step(grads)
            if trees:
                self.counters.supervised_updates += 1
            if outside and adv != 0.0:
                self.counters.likelihood_ratio_updates += 1
        if reward > 0 and outside and self.buffers.add(p, tree):
            self.counters.buffer_inserts += 1
        return loss

    # -------------------------------------------------------------- loop

    def run_epoch(self) -> dict:
        cfg = self.config
        order = self.rng.permutation(len(self.problems))
        before = self.counters.fixes_found
        losses = []
        step = {
            "LBF": self.lbf_step,
            "LBF-no-memory": self.lbf_step,
            "LBF-fully": self.lbf_step,
            "REINFORCE": self.reinforce_step,
            "MAPO": self.mapo_step,
        }[cfg.strategy]
        for i in order:
            loss = step(self.problems[int(i)])
            if loss is not None:
                losses.append(loss)
        self.opt.flush()
        self.epoch += 1
        sizes = self.buffers.sizes([p.id for p in self.problems])
        return {
            "epoch": self.epoch,
            "strategy": cfg.strategy,
            "train_acc": answer_accuracy(self.policy, self.problems, cfg.prior),
            "fixes_found": self.counters.fixes_found - before,
            "mean_buffer_size": float(np.mean(sizes)) if sizes else 0.0,
            "loss": float(np.mean(losses)) if losses else 0.0,
        }

    def train(self, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        rows = []
        for _ in range(self.config.epochs):
            row = self.run_epoch()
            rows.append(row)
            log.info("epoch %(epoch)d %(strategy)s acc=%(train_acc).3f fixes=%(fixes_found)d "
                     "buf=%(mean_buffer_size).2f loss=%(loss).4f", row)
            if on_epoch is not None:
                on_epoch(row)
        return rows


def lbf_epoch(problems, buffers: MemoryBuffer, policy: Policy, config: TrainConfig,
              rng: np.random.Generator, opt: Optimizer | None = None) -> dict:
    """One learning-by-fixing pass using caller-owned state.

    Pass the same ``opt`` across calls to keep Adam moments.
    """
    tr = Trainer(problems, config, policy=policy)
    tr.buffers = buffers
    tr.rng = rng
    if opt is not None:
        tr.opt = opt
    return tr.run_epoch()
