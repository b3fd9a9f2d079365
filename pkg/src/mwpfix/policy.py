"""Goal-driven tree decoder with hand-written gradients (numpy only).

The encoder is a bidirectional GRU over word embeddings; a node's goal
vector attends over the encoder states, and every vocabulary token is
scored against ``[goal, context, token embedding]``.  Operators split a
goal into a left sub-goal and, once the left subtree is finished, a
right sub-goal conditioned on a summary of that subtree.  Decoding is
preorder and always runs under the size masks from :mod:`tree_reg`.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .expr import CONSTANTS, OPERATORS, ExprTree, Kind, Problem, Token, Vocab, to_prefix
from .tree_reg import category_mask

PAD, UNK, NUM = "<pad>", "<unk>", "<num>"
CHECKPOINT_VERSION = 1

N_OPS = len(OPERATORS)
N_CONSTS = len(CONSTANTS)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def param_shapes(d: int, n_words: int) -> dict[str, tuple[int, ...]]:
    return {
        "emb": (n_words, d),
        "gru_f_Wx": (3 * d, d),
        "gru_f_Wh": (3 * d, d),
        "gru_f_b": (3 * d,),
        "gru_b_Wx": (3 * d, d),
        "gru_b_Wh": (3 * d, d),
        "gru_b_b": (3 * d,),
        "att_Wq": (d, d),
        "att_Wh": (d, d),
        "att_v": (d,),
        "score_Wq": (d, d),
        "score_Wc": (d, d),
        "score_We": (d, d),
        "score_w": (d,),
        "M_op": (N_OPS, d),
        "M_con": (N_CONSTS, d),
        "goal_left": (d, 3 * d),
        "goal_right": (d, 4 * d),
        "subtree": (d, 3 * d),
    }


def build_word_index(problems: Sequence[Problem]) -> dict[str, int]:
    words = {PAD: 0, UNK: 1, NUM: 2}
    for p in problems:
        qpos = set(p.positions)
        for i, w in enumerate(p.words):
            if i not in qpos and w not in words:
                words[w] = len(words)
    return words


class Encoding(NamedTuple):
    H: np.ndarray  # (n, d) contextual states
    q0: np.ndarray  # (d,) root goal
    E: np.ndarray  # (V, d) token embeddings for this problem
    PE: np.ndarray  # (V, d) E @ score_We.T
    AH: np.ndarray  # (n, d) H @ att_Wh.T
    is_op: np.ndarray
    cache: dict


class DecodeTrace(NamedTuple):
    tokens: tuple[Token, ...]
    distributions: tuple[np.ndarray, ...]
    goals: tuple[np.ndarray, ...]
    logprob: float

    @property
    def text(self) -> str:
        return " ".join(t.symbol for t in self.tokens)


class _State(NamedTuple):
    goal: int | None
    frames: tuple  # (q_ref, c_ref, e_ref, left_summary_ref | None)
    n_ops: int
    n_nums: int
    tokens: tuple[int, ...]
    logp: float
    dists: tuple
    goals: tuple


@dataclass
class Policy:
    """Parameters plus the word index they were built for."""

    params: dict[str, np.ndarray]
    words: dict[str, int]
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.params["att_v"].shape[0]

    @classmethod
    def create(cls, words: dict[str, int], d: int = 64, seed: int = 0, scale: float = 0.08) -> "Policy":
        rng = np.random.default_rng(seed)
        params = {
            k: rng.uniform(-scale, scale, size=s) for k, s in param_shapes(d, len(words)).items()
        }
        for k in ("gru_f_b", "gru_b_b"):
            params[k][:] = 0.0
        return cls(params, dict(words))

    def copy(self) -> "Policy":
        return Policy({k: v.copy() for k, v in self.params.items()}, dict(self.words))

    # ------------------------------------------------------------------ encoder

    def word_ids(self, problem: Problem) -> np.ndarray:
        qpos = set(problem.positions)
        return np.array(
            [
                self.words[NUM] if i in qpos else self.words.get(w, self.words[UNK])
                for i, w in enumerate(problem.words)
            ],
            dtype=np.int64,
        )

    def _gru(self, X: np.ndarray, prefix: str, reverse: bool):
        P = self.params
        Wx, Wh, b = P[prefix + "Wx"], P[prefix + "Wh"], P[prefix + "b"]
        d = self.d
        n = X.shape[0]
        Xp = X @ Wx.T + b
        h = np.zeros(d)
        out = np.zeros((n, d))
        steps = []
        order = range(n - 1, -1, -1) if reverse else range(n)
        Wzr, Wn = Wh[: 2 * d], Wh[2 * d :]
        for t in order:
            zr = _sigmoid(Xp[t, : 2 * d] + Wzr @ h)
            z, r = zr[:d], zr[d:]
            rh = r * h
            nn = np.tanh(Xp[t, 2 * d :] + Wn @ rh)
            h_new = (1.0 - z) * nn + z * h
            steps.append((t, h, z, r, rh, nn))
            h = h_new
            out[t] = h
        return out, steps

    def encode(self, problem: Problem, vocab: Vocab | None = None) -> Encoding:
        if not problem.words:
            raise ValueError(f"problem {problem.id} has no words")
        P = self.params
        ids = self.word_ids(problem)
        X = P["emb"][ids]
        fwd, f_steps = self._gru(X, "gru_f_", reverse=False)
        bwd, b_steps = self._gru(X, "gru_b_", reverse=True)
        H = fwd + bwd
        q0 = fwd[-1] + bwd[0]
        vocab = vocab or problem.vocab
        E = self._token_embeddings(vocab, H, problem)
        return Encoding(
            H=H,
            q0=q0,
            E=E,
            PE=E @ P["score_We"].T,
            AH=H @ P["att_Wh"].T,
            is_op=vocab.is_op,
            cache={"ids": ids, "X": X, "f_steps": f_steps, "b_steps": b_steps, "vocab": vocab,
                   "problem": problem},
        )

    def _token_embeddings(self, vocab: Vocab, H: np.ndarray, problem: Problem) -> np.ndarray:
        P = self.params
        rows = []
        for t in vocab.tokens:
            if t.kind == Kind.OP:
                rows.append(P["M_op"][t.index])
            elif t.kind == Kind.CONST:
                rows.append(P["M_con"][t.index])
            else:
                rows.append(H[problem.positions[t.index]])
        return np.array(rows)

    # ------------------------------------------------------------------ pieces

    def attend(self, q: np.ndarray, enc: Encoding) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Context vector, attention weights and the tanh activations."""
        T = np.tanh(enc.AH + self.params["att_Wq"] @ q)
        a = _softmax(T @ self.params["att_v"])
        return a @ enc.H, a, T

    def score_tokens(
        self, q: np.ndarray, c: np.ndarray, enc: Encoding, mask: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Masked distribution over the vocabulary and the tanh activations."""
        P = self.params
        u = P["score_Wq"] @ q + P["score_Wc"] @ c
        T = np.tanh(enc.PE + u)
        s = T @ P["score_w"]
        probs = np.zeros_like(s)
        if not mask.any():
            raise ValueError("mask admits no token")
        probs[mask] = _softmax(s[mask])
        return probs, T

    def decompose_goal(
        self,
        q: np.ndarray,
        c: np.ndarray,
        e_op: np.ndarray,
        left_summary: np.ndarray | None = None,
    ) -> np.ndarray:
        """Left sub-goal, or the right one once the left summary is known."""
        if left_summary is None:
            return np.tanh(self.params["goal_left"] @ np.concatenate([q, c, e_op]))
        return np.tanh(self.params["goal_right"] @ np.concatenate([q, c, e_op, left_summary]))

    def summarize(self, e_op: np.ndarray, g_left: np.ndarray, g_right: np.ndarray) -> np.ndarray:
        return np.tanh(self.params["subtree"] @ np.concatenate([e_op, g_left, g_right]))

    # ------------------------------------------------------------------ decoding

    def decode(
        self,
        problem: Problem,
        size: int,
        mode: str = "greedy",
        rng: np.random.Generator | None = None,
        width: int = 5,
        enc: Encoding | None = None,
    ) -> list[DecodeTrace]:
        """Decode trees of exactly ``size`` tokens.

        ``mode`` is ``"greedy"``, ``"sample"`` (needs ``rng``) or ``"beam"``.
        Greedy and sample return one trace; beam returns up to ``width``
        traces sorted by log-probability, ties by token order.
        """
        enc = enc or self.encode(problem)
        run = _Run(self, enc, record=False)
        vocab = enc.cache["vocab"]
        if mode == "beam":
            return self._beam(run, vocab, size, width)
        if mode == "sample" and rng is None:
            raise ValueError("sampling needs an rng")
        st = run.start()
        for _ in range(size):
            mask, probs, c_ref = run.step_dist(st, size)
            if mode == "greedy":
                j = int(np.argmax(probs))
            elif mode == "sample":
                j = int(rng.choice(len(probs), p=probs))
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
            st = run.advance(st, j, c_ref, probs)
        return [run.trace(st, vocab)]

    def _beam(self, run: "_Run", vocab: Vocab, size: int, width: int) -> list[DecodeTrace]:
        beams = [run.start()]
        for _ in range(size):
            cands = []
            for bi, st in enumerate(beams):
                mask, probs, c_ref = run.step_dist(st, size)
                with np.errstate(divide="ignore"):
                    lp = np.log(probs)
                for j in np.flatnonzero(mask):
                    cands.append((st.logp + lp[j], st.tokens + (int(j),), bi, int(j), c_ref, probs))
            cands.sort(key=lambda x: (-x[0], x[1]))
            beams = [run.advance(beams[bi], j, c_ref, probs) for _, _, bi, j, c_ref, probs in cands[:width]]
        beams.sort(key=lambda s: (-s.logp, s.tokens))
        return [run.trace(s, vocab) for s in beams]

    def token_distributions(
        self, problem: Problem, tokens: Sequence[Token], enc: Encoding | None = None
    ) -> np.ndarray:
        """Teacher-forced per-position distributions, masked for ``len(tokens)``."""
        enc = enc or self.encode(problem)
        vocab = enc.cache["vocab"]
        run = _Run(self, enc, record=False)
        st = run.start()
        out = np.zeros((len(tokens), len(vocab)))
        for i, t in enumerate(tokens):
            _, probs, c_ref = run.step_dist(st, len(tokens))
            out[i] = probs
            st = run.advance(st, vocab.index(t), c_ref, probs)
        return out

    def sequence_logprob(self, problem: Problem, tokens: Sequence[Token], enc: Encoding | None = None) -> float:
        enc = enc or self.encode(problem)
        vocab = enc.cache["vocab"]
        dists = self.token_distributions(problem, tokens, enc)
        with np.errstate(divide="ignore"):
            return float(sum(math.log(dists[i][vocab.index(t)]) if dists[i][vocab.index(t)] > 0 else -math.inf
                             for i, t in enumerate(tokens)))

    # ------------------------------------------------------------------ training

    def loss_and_grads(
        self,
        problem: Problem,
        trees: Sequence[ExprTree | Sequence[Token]],
        weights: Sequence[float] | None = None,
    ) -> tuple[float, dict[str, np.ndarray]]:
        """``sum_k w_k * -log p(tree_k | problem)`` and its exact gradient.

        Probabilities are the masked teacher-forced ones, the same that
        decoding at that tree's size would use.
        """
        if not trees:
            raise ValueError("need at least one tree")
        weights = [1.0] * len(trees) if weights is None else list(weights)
        enc = self.encode(problem)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dH = np.zeros_like(enc.H)
        dq0 = np.zeros(self.d)
        dE = np.zeros_like(enc.E)
        dPE = np.zeros_like(enc.PE)
        dAH = np.zeros_like(enc.AH)
        vocab = enc.cache["vocab"]
        loss = 0.0
        for tree, w in zip(trees, weights):
            toks = to_prefix(tree) if not isinstance(tree, (list, tuple)) else list(tree)
            if w == 0.0:
                continue
            run = _Run(self, enc, record=True)
            st = run.start()
            for t in toks:
                j = vocab.index(t)
                _, probs, c_ref = run.step_dist(st, len(toks), gold=j, weight=w)
                if probs[j] <= 0:
                    raise ValueError(f"gold token {t.symbol} is masked")
                loss -= w * math.log(probs[j])
                st = run.advance(st, j, c_ref, probs)
            run.backward(grads, dH, dq0, dE, dPE, dAH)
        self._encoder_backward(enc, grads, dH, dq0, dE, dPE, dAH)
        return loss, grads

    def _encoder_backward(self, enc, grads, dH, dq0, dE, dPE, dAH) -> None:
        P = self.params
        problem: Problem = enc.cache["problem"]
        vocab: Vocab = enc.cache["vocab"]
        # score_We and token embeddings
        grads["score_We"] += dPE.T @ enc.E
        dE = dE + dPE @ P["score_We"]
        grads["att_Wh"] += dAH.T @ enc.H
        dH = dH + dAH @ P["att_Wh"]
        for j, t in enumerate(vocab.tokens):
            if t.kind == Kind.OP:
                grads["M_op"][t.index] += dE[j]
            elif t.kind == Kind.CONST:
                grads["M_con"][t.index] += dE[j]
            else:
                dH[problem.positions[t.index]] += dE[j]
        n = enc.H.shape[0]
        # H = fwd + bwd ; q0 = fwd[-1] + bwd[0]
        d_fwd = dH.copy()
        d_bwd = dH.copy()
        d_fwd[n - 1] += dq0
        d_bwd[0] += dq0
        dX = np.zeros_like(enc.cache["X"])
        self._gru_backward(enc.cache["f_steps"], enc.cache["X"], d_fwd, "gru_f_", grads, dX)
        self._gru_backward(enc.cache["b_steps"], enc.cache["X"], d_bwd, "gru_b_", grads, dX)
        np.add.at(grads["emb"], enc.cache["ids"], dX)

    def _gru_backward(self, steps, X, d_out, prefix, grads, dX) -> None:
        P = self.params
        d = self.d
        Wh = P[prefix + "Wh"]
        Wzr, Wn = Wh[: 2 * d], Wh[2 * d :]
        dXp = np.zeros((X.shape[0], 3 * d))
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros(d)
        for t, h_prev, z, r, rh, nn in reversed(steps):
            dh = d_out[t] + dh_next
            dn_pre = dh * (1.0 - z) * (1.0 - nn * nn)
            dz_pre = dh * (h_prev - nn) * z * (1.0 - z)
            drh = Wn.T @ dn_pre
            dr_pre = drh * h_prev * r * (1.0 - r)
            dzr = np.concatenate([dz_pre, dr_pre])
            dWh[: 2 * d] += np.outer(dzr, h_prev)
            dWh[2 * d :] += np.outer(dn_pre, rh)
            dXp[t, : 2 * d] = dzr
            dXp[t, 2 * d :] = dn_pre
            dh_next = dh * z + drh * r + Wzr.T @ dzr
        grads[prefix + "Wh"] += dWh
        grads[prefix + "Wx"] += dXp.T @ X
        grads[prefix + "b"] += dXp.sum(axis=0)
        dX += dXp @ P[prefix + "Wx"]

    # ------------------------------------------------------------------ io

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint (see README for the layout)."""
        meta = {"version": CHECKPOINT_VERSION, "d": self.d,
                "shapes": {k: list(v.shape) for k, v in self.params.items()}}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        words = sorted(self.words, key=self.words.get)
        arrays["words"] = np.array(json.dumps(words))
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Policy":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            words = json.loads(str(z["words"]))
            params = {k.split("/", 1)[1]: z[k].astype(np.float64) for k in z.files if k.startswith("param/")}
        for k, shape in meta["shapes"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"shape mismatch for {k}")
        return cls(params, {w: i for i, w in enumerate(words)})


class _Run:
    """Decoding workspace for one problem.

    Vectors live in an append-only list and are addressed by integer
    references; negative references ``-(j + 1)`` name row ``j`` of the
    token-embedding matrix.  Because the store is append-only, several
    beam hypotheses can share it.  With ``record=True`` every operation is
    logged for :meth:`backward`.
    """

    def __init__(self, policy: Policy, enc: Encoding, record: bool):
        self.policy = policy
        self.P = policy.params
        self.enc = enc
        self.vals: list[np.ndarray] = [enc.q0]
        self.tape: list[tuple] | None = [] if record else None

    def vec(self, ref: int) -> np.ndarray:
        return self.enc.E[-ref - 1] if ref < 0 else self.vals[ref]

    def new(self, v: np.ndarray) -> int:
        self.vals.append(v)
        return len(self.vals) - 1

    def start(self) -> _State:
        return _State(0, (), 0, 0, (), 0.0, (), ())

    def step_dist(self, st: _State, size: int, gold: int | None = None, weight: float = 1.0):
        q_ref = st.goal
        q = self.vals[q_ref]
        c, a, Ta = self.policy.attend(q, self.enc)
        c_ref = self.new(c)
        ops_ok, nums_ok = category_mask(size, st.n_ops, st.n_nums)
        mask = np.where(self.enc.is_op, ops_ok, nums_ok)
        probs, Ts = self.policy.score_tokens(q, c, self.enc, mask)
        if self.tape is not None:
            self.tape.append(("att", q_ref, c_ref, a, Ta))
            self.tape.append(("score", q_ref, c_ref, probs, Ts, mask, gold, weight))
        return mask, probs, c_ref

    def advance(self, st: _State, j: int, c_ref: int, probs: np.ndarray) -> _State:
        tok_is_op = bool(self.enc.is_op[j])
        e_ref = -(j + 1)
        p = probs[j]
        logp = st.logp + (math.log(p) if p > 0 else -math.inf)
        dists = st.dists + (probs,)
        goals = st.goals + (self.vals[st.goal],)
        if tok_is_op:
            x = np.concatenate([self.vals[st.goal], self.vals[c_ref], self.vec(e_ref)])
            out = np.tanh(self.P["goal_left"] @ x)
            g_id = self.new(out)
            if self.tape is not None:
                self.tape.append(("left", (st.goal, c_ref, e_ref), g_id, x, out))
            frames = st.frames + ((st.goal, c_ref, e_ref, None),)
            return _State(g_id, frames, st.n_ops + 1, st.n_nums, st.tokens + (j,), logp, dists, goals)
        g = e_ref
        frames = list(st.frames)
        goal = None
        while frames:
            q_ref, pc_ref, pe_ref, gl = frames[-1]
            if gl is None:
                frames[-1] = (q_ref, pc_ref, pe_ref, g)
                x = np.concatenate([self.vals[q_ref], self.vals[pc_ref], self.vec(pe_ref), self.vec(g)])
                out = np.tanh(self.P["goal_right"] @ x)
                goal = self.new(out)
                if self.tape is not None:
                    self.tape.append(("right", (q_ref, pc_ref, pe_ref, g), goal, x, out))
                break
            frames.pop()
            if not frames:
                break
            x = np.concatenate([self.vec(pe_ref), self.vec(gl), self.vec(g)])
            out = np.tanh(self.P["subtree"] @ x)
            new_g = self.new(out)
            if self.tape is not None:
                self.tape.append(("sum", (pe_ref, gl, g), new_g, x, out))
            g = new_g
        return _State(goal, tuple(frames), st.n_ops, st.n_nums + 1, st.tokens + (j,), logp, dists, goals)

    def trace(self, st: _State, vocab: Vocab) -> DecodeTrace:
        return DecodeTrace(tuple(vocab.tokens[j] for j in st.tokens), st.dists, st.goals, st.logp)

    def backward(self, grads, dH, dq0, dE, dPE, dAH) -> None:
        P = self.P
        d = self.policy.d
        G: dict[int, np.ndarray] = {}

        def add(ref: int, g: np.ndarray) -> None:
            if ref < 0:
                dE[-ref - 1] += g
            elif ref in G:
                G[ref] = G[ref] + g
            else:
                G[ref] = g

        for rec in reversed(self.tape):
            kind = rec[0]
            if kind == "score":
                _, q_ref, c_ref, probs, T, mask, gold, w = rec
                ds = w * probs
                ds[gold] -= w
                grads["score_w"] += T.T @ ds
                dpre = np.outer(ds, P["score_w"]) * (1.0 - T * T)
                dPE += dpre
                du = dpre.sum(axis=0)
                grads["score_Wq"] += np.outer(du, self.vals[q_ref])
                grads["score_Wc"] += np.outer(du, self.vals[c_ref])
                add(q_ref, P["score_Wq"].T @ du)
                add(c_ref, P["score_Wc"].T @ du)
            elif kind == "att":
                _, q_ref, c_ref, a, T = rec
                dc = G.pop(c_ref, None)
                if dc is None:
                    continue
                H = self.enc.H
                dH += np.outer(a, dc)
                da = H @ dc
                de = a * (da - a @ da)
                grads["att_v"] += T.T @ de
                dpre = np.outer(de, P["att_v"]) * (1.0 - T * T)
                dAH += dpre
                dsum = dpre.sum(axis=0)
                grads["att_Wq"] += np.outer(dsum, self.vals[q_ref])
                add(q_ref, P["att_Wq"].T @ dsum)
            else:
                _, refs, out_id, x, out = rec
                dout = G.pop(out_id, None)
                if dout is None:
                    continue
                name = {"left": "goal_left", "right": "goal_right", "sum": "subtree"}[kind]
                dpre = dout * (1.0 - out * out)
                grads[name] += np.outer(dpre, x)
                dx = P[name].T @ dpre
                for k, ref in enumerate(refs):
                    add(ref, dx[k * d : (k + 1) * d])
        if 0 in G:
            dq0 += G.pop(0)
