"""Independent reference computations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np

from goalplan.planner import ContextMLP, CountModel, FreeGrammar, NextTokenModel, sequence_logprob


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_difference_check(loss_fn, params: dict, grads: dict, picks, h: float = 1e-5) -> float:
    """Max relative error between analytic grads and central differences at (name, index) picks."""
    worst = 0.0
    for name, idx in picks:
        p = params[name]
        old = p[idx]
        p[idx] = old + h
        up = loss_fn(params)
        p[idx] = old - h
        down = loss_fn(params)
        p[idx] = old
        worst = max(worst, rel_err(float(grads[name][idx]), (up - down) / (2 * h)))
    return worst


def random_picks(params: dict, rng, n: int, rows: dict | None = None):
    """n (name, index) pairs spread over all tensors; `rows` restricts a tensor's first axis."""
    names = sorted(params)
    out = []
    for k in range(n):
        name = names[k % len(names)]
        shape = params[name].shape
        idx = [int(rng.integers(s)) for s in shape]
        if rows and name in rows:
            idx[0] = int(rng.choice(rows[name]))
        out.append((name, tuple(idx)))
    return out


def exhaustive_argmax(model, vocab: int, end: int, max_len: int, prefix=()):
    """Best finished continuation by enumeration; ties -> lexicographically smaller."""
    g = FreeGrammar(vocab, end, max_len)
    best = None
    for L in range(1, max_len + 1):
        for body in itertools.product([t for t in range(vocab) if t != end], repeat=L - 1):
            seq = list(body) + [end]
            lp = sequence_logprob(model, list(prefix), seq, g)
            if lp == -math.inf:
                continue
            key = (-lp, tuple(seq))
            if best is None or key < best:
                best = key
    return list(best[1]), -best[0]


def random_count_model(rng, vocab: int, alpha: float = 0.3):
    order = int(rng.integers(1, 4))
    seqs = [rng.integers(0, vocab, size=int(rng.integers(2, 8))).tolist() for _ in range(int(rng.integers(2, 6)))]
    return CountModel(order=order, alpha=alpha, vocab_size=vocab).fit(seqs)


class TableModel(NextTokenModel):
    """Next-token distribution looked up from a dict keyed by the generated history."""

    def __init__(self, table: dict, vocab: int):
        self.table, self.vocab_size = table, vocab

    def init_state(self, history):
        return tuple(history)

    def step_state(self, state, tok):
        return state + (tok,)

    def state_probs(self, state):
        p = np.asarray(self.table.get(state, [1.0 / self.vocab_size] * self.vocab_size), dtype=np.float64)
        return p / p.sum()


A, B, EOS = 0, 1, 2
# after A every continuation is weak, after B the end token is likely
GREEDY_TRAP = TableModel({(): [0.6, 0.4, 0.0], (A,): [0.34, 0.33, 0.33], (B,): [0.05, 0.05, 0.9]}, 3)
GREEDY_TRAP_GRAMMAR = dict(vocab_size=3, end=EOS, max_len=3)


def small_mlp(seed=0, vocab=40, context=6):
    m = ContextMLP(context=context, embed_dim=4, hidden=8, seed=seed, vocab_size=vocab)
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    return m


def brute_rdp(pts, eps):
    """Plain recursive reference: perpendicular distance to the infinite chord line."""

    def dist(p, a, b):
        ab = [b[i] - a[i] for i in range(3)]
        ap = [p[i] - a[i] for i in range(3)]
        n = math.sqrt(sum(v * v for v in ab))
        if n == 0:
            return math.sqrt(sum(v * v for v in ap))
        cx = ap[1] * ab[2] - ap[2] * ab[1]
        cy = ap[2] * ab[0] - ap[0] * ab[2]
        cz = ap[0] * ab[1] - ap[1] * ab[0]
        return math.sqrt(cx * cx + cy * cy + cz * cz) / n

    def rec(lo, hi):
        if hi - lo < 2:
            return {lo, hi}
        best, where = -1.0, None
        for k in range(lo + 1, hi):
            d = dist(pts[k], pts[lo], pts[hi])
            if d > best:
                best, where = d, k
        if best > eps:
            return rec(lo, where) | rec(where, hi)
        return {lo, hi}

    return sorted(rec(0, len(pts) - 1))


def random_polylines(n=200, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        m = int(rng.integers(3, 41))
        pts = np.cumsum(rng.normal(0, 0.1, size=(m, 3)), axis=0).tolist()
        yield pts, [0.01, 0.05, 0.2][i % 3]
