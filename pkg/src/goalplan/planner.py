"""Interleaved subtask / goal-raster sequence models and grammar-masked beam search.

Two next-token models share one contract: an exact count model (useful as a decoding
oracle and for memorising small corpora) and a fixed-context MLP trained with
teacher forcing.  Models expose an incremental state so decoding long sequences
costs O(1) model work per token.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import codec
from .codec import BOT, EOT, IMAGE_TOKENS, PAD, VOCAB_SIZE, CodecError, TokenSequence
from .nn import Adam, MomentumSGD, TanhMLP

log = logging.getLogger(__name__)


class PlannerError(ValueError):
    pass


class BeamError(PlannerError):
    def __init__(self, message: str, best: list[int] | None = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PlanStep:
    subtask: str
    head: np.ndarray
    wrist: np.ndarray
    stage: int = 0


# ---------------------------------------------------------------- model contract

class NextTokenModel:
    """P(u_k | u_<k).  Subclasses implement the incremental state functions."""

    vocab_size: int = VOCAB_SIZE
    kind = "abstract"

    def init_state(self, history: Sequence[int]) -> Any:
        raise NotImplementedError

    def step_state(self, state: Any, tok: int) -> Any:
        raise NotImplementedError

    def state_probs(self, state: Any) -> np.ndarray:
        raise NotImplementedError

    def batch_state_probs(self, states: Sequence[Any]) -> np.ndarray:
        return np.stack([self.state_probs(s) for s in states])

    def probs(self, history: Sequence[int]) -> np.ndarray:
        return self.state_probs(self.init_state(history))


# ---------------------------------------------------------------- count model

_HASH_MOD = (1 << 61) - 1
_HASH_BASE = 1_000_003
_OPENING_LEN = 1 + 2 * (IMAGE_TOKENS + 2)  # BOS and two framed rasters


@dataclass(frozen=True)
class _CountState:
    length: int
    prefix_hash: int
    tail: tuple[int, ...]
    # structural context for the order-0 backoff
    instr: int = 0  # hash of the first text span (the instruction)
    last: int = 0  # hash of the latest completed text span
    cur: int = 0  # hash of the text span being read; 0 outside text
    slot: int = 0  # 1 + view * 512 + index of the next image token; 0 outside images
    ctx: tuple[int, ...] = ()  # tokens before the first BOT, kept until it arrives
    depth: int = -1  # stage count of the nearest training context; -1 until the first BOT


class CountModel(NextTokenModel):
    """Add-alpha count model over (m-1)-token contexts.

    order=0 conditions on the full history (a rolling prefix hash plus the length),
    which makes it an exact memoriser of its training corpus.  When a history was
    never seen it backs off to a structural context: the stage count of the training
    sequence whose opening frame has the nearest token histograms, the instruction, the
    latest text span, the text read so far, the image slot and the last 3..0 tokens.
    The next subtask, goal-image layout and plan length then follow the subtask just
    decoded and how far into the task the opening frame looks.  Past that it backs
    off to plain suffix contexts, unigram counts and uniform.
    """

    kind = "count"

    def __init__(self, order: int = 4, alpha: float = 0.0, vocab_size: int = VOCAB_SIZE):
        if order < 0:
            raise PlannerError("order must be >= 0")
        if alpha < 0:
            raise PlannerError("alpha must be >= 0")
        self.order = int(order)
        self.alpha = float(alpha)
        self.vocab_size = int(vocab_size)
        self.tables: dict = {}
        self.corpus: list[list[int]] = []
        self._openings: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._suffix_lengths = self._backoff_lengths()

    def _backoff_lengths(self) -> list[int]:
        top = 3 if self.order == 0 else self.order - 1
        return list(range(top, -1, -1))

    # fitting ------------------------------------------------------
    def fit(self, sequences: Sequence[Sequence[int]]) -> "CountModel":
        self.corpus = [list(map(int, s)) for s in sequences]
        self._openings = self._index_openings(self.corpus) if self.order == 0 else {}
        tables: dict = {}
        for seq in self.corpus:
            state = self.init_state([])
            for tok in seq:
                if not 0 <= tok < self.vocab_size:
                    raise PlannerError(f"token {tok} outside vocabulary of size {self.vocab_size}")
                for key in self._keys(state):
                    row = tables.setdefault(key, {})
                    row[tok] = row.get(tok, 0) + 1
                state = self.step_state(state, tok)
        self.tables = tables
        return self

    def _keys(self, state: _CountState):
        if self.order == 0:
            yield ("h", state.length, state.prefix_hash)
            for n in self._suffix_lengths:
                if n <= len(state.tail):
                    yield ("x", state.depth, state.instr, state.last, state.cur, state.slot,
                           state.tail[len(state.tail) - n:])
        for n in self._suffix_lengths:
            if n <= len(state.tail) or n == 0:
                yield ("s", state.tail[len(state.tail) - n:] if n else ())

    def _opening_features(self, openings: np.ndarray) -> np.ndarray:
        # per-view token histograms: insensitive to where the wrist view happens to be centred
        n, k = openings.shape
        views = [slice(2, 2 + IMAGE_TOKENS), slice(4 + IMAGE_TOKENS, 4 + 2 * IMAGE_TOKENS)] \
            if k == _OPENING_LEN else [slice(0, k)]
        v = self.vocab_size
        out = np.zeros((n, v * len(views)), dtype=np.int64)
        rows = np.arange(n)[:, None]
        for j, sl in enumerate(views):
            np.add.at(out, (rows, openings[:, sl] + j * v), 1)
        return out

    def _index_openings(self, corpus):
        # opening = tokens before the first BOT, grouped by length
        groups: dict[int, tuple[list, list]] = {}
        for seq in corpus:
            k = seq.index(BOT) if BOT in seq else len(seq)
            g = groups.setdefault(k, ([], []))
            g[0].append(seq[:k])
            g[1].append(seq.count(codec.STAGE_END))
        return {k: (self._opening_features(np.array(a, dtype=np.int64).reshape(len(a), k)), np.array(d))
                for k, (a, d) in groups.items()}

    def _nearest_depth(self, opening: tuple[int, ...]) -> int:
        group = self._openings.get(len(opening))
        if group is None:
            return -2
        feats, depths = group
        q = self._opening_features(np.array(opening, dtype=np.int64).reshape(1, -1))
        dist = np.abs(feats - q).sum(axis=1)
        return int(depths[int(np.argmin(dist))])

    # incremental state ---------------------------------------------
    def init_state(self, history):
        s = _CountState(0, 0, ())
        for t in history:
            s = self.step_state(s, t)
        return s

    def step_state(self, state, tok):
        keep = max(self._suffix_lengths[0], 0)
        tail = (state.tail + (int(tok),))[-keep:] if keep else ()
        tok = int(tok)
        h = (state.prefix_hash * _HASH_BASE + tok + 1) % _HASH_MOD
        instr, last, cur = state.instr, state.last, state.cur
        if tok == BOT:
            cur = 1
        elif tok == EOT and cur:
            last, cur = cur, 0
            instr = instr or last
        elif cur:
            cur = (cur * _HASH_BASE + tok + 1) % _HASH_MOD
        if tok == codec.BOI_HEAD:
            slot = 1
        elif tok == codec.BOI_WRIST:
            slot = 1 + IMAGE_TOKENS * 2
        elif state.slot and codec.token_kind(tok) == "image":
            slot = state.slot + 1
        else:
            slot = 0
        ctx, depth = state.ctx, state.depth
        if self.order == 0 and depth == -1:
            if tok == BOT:
                ctx, depth = (), self._nearest_depth(ctx)
            else:
                ctx = ctx + (tok,)
        return _CountState(state.length + 1, h, tail, instr, last, cur, slot, ctx, depth)

    def row(self, state) -> dict | None:
        """Counts at the longest seen context for this state."""
        for key in self._keys(state):
            row = self.tables.get(key)
            if row:
                return row
        return None

    def state_probs(self, state):
        v = self.vocab_size
        row = self.row(state)
        p = np.full(v, self.alpha, dtype=np.float64)
        if row:
            toks = np.fromiter(row.keys(), dtype=np.int64, count=len(row))
            cnt = np.fromiter(row.values(), dtype=np.float64, count=len(row))
            p[toks] += cnt
        total = p.sum()
        if total <= 0:
            return np.full(v, 1.0 / v)
        return p / total


# ---------------------------------------------------------------- context MLP

class ContextMLP(NextTokenModel):
    """Embeddings of the last C tokens (PAD on the left) -> 2 tanh layers -> vocabulary logits."""

    kind = "context_mlp"

    def __init__(self, context: int = 64, embed_dim: int = 32, hidden: int = 128, seed: int = 0,
                 vocab_size: int = VOCAB_SIZE):
        self.context = int(context)
        self.embed_dim = int(embed_dim)
        self.hidden = int(hidden)
        self.vocab_size = int(vocab_size)
        self.mlp = TanhMLP("", [self.context * self.embed_dim, self.hidden, self.hidden, self.vocab_size])
        rng = np.random.default_rng(seed)
        self.params = {"embed": (rng.standard_normal((self.vocab_size, self.embed_dim)) * 0.1).astype(np.float32)}
        self.params.update(self.mlp.init(rng))

    def param_names(self) -> list[str]:
        return ["embed", *self.mlp.names()]

    def window(self, history: Sequence[int]) -> tuple[int, ...]:
        h = tuple(int(t) for t in history[-self.context:])
        return (PAD,) * (self.context - len(h)) + h

    def init_state(self, history):
        return self.window(history)

    def step_state(self, state, tok):
        return state[1:] + (int(tok),)

    def logits(self, windows: np.ndarray, params=None) -> tuple[np.ndarray, list]:
        params = self.params if params is None else params
        x = params["embed"][windows].reshape(len(windows), -1)
        return self.mlp.forward(params, x)

    def batch_state_probs(self, states):
        out, _ = self.logits(np.asarray(states, dtype=np.int64))
        return softmax(out.astype(np.float64))

    def state_probs(self, state):
        return self.batch_state_probs([state])[0]

    def loss_and_grads(self, windows: np.ndarray, targets: np.ndarray, params=None):
        """Mean negative log-likelihood (nats) of targets and its gradients."""
        params = self.params if params is None else params
        windows = np.asarray(windows, dtype=np.int64)
        out, acts = self.logits(windows, params)
        p = softmax(out)
        n = len(targets)
        picked = p[np.arange(n), targets]
        if np.any(picked <= 0):
            raise PlannerError("zero probability at a supervised position")
        loss = float(-np.log(picked).mean())
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        d /= n
        grads: dict[str, np.ndarray] = {}
        dx = self.mlp.backward(params, acts, d, grads)
        gE = np.zeros_like(params["embed"])
        np.add.at(gE, windows.ravel(), dx.reshape(-1, self.embed_dim))
        grads["embed"] = gE
        return loss, grads


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- loss and training

def supervised_positions(tokens: Sequence[int]) -> range:
    """Positions predicted by the planner: everything after the instruction's EOT."""
    return range(codec.context_length(list(tokens)), len(tokens))


def ce_loss(model: NextTokenModel, sequence) -> tuple[float, dict]:
    """Cross-entropy in nats/token over supervised positions, plus gradients for neural models."""
    toks = sequence.tokens if isinstance(sequence, TokenSequence) else list(sequence)
    codec.validate_sequence(toks)
    pos = list(supervised_positions(toks))
    if not pos:
        raise PlannerError("sequence has no supervised positions")
    if isinstance(model, ContextMLP):
        windows = np.array([model.window(toks[:k]) for k in pos])
        targets = np.array([toks[k] for k in pos])
        ref = {k: v.astype(np.float64) for k, v in model.params.items()}
        return model.loss_and_grads(windows, targets, ref)
    state = model.init_state(toks[:pos[0]])
    total = 0.0
    for k in pos:
        p = model.state_probs(state)[toks[k]]
        if p <= 0:
            raise PlannerError(f"zero probability for token {toks[k]} at position {k}")
        total -= math.log(p)
        state = model.step_state(state, toks[k])
    return total / len(pos), {}


def corpus_loss(model: NextTokenModel, sequences) -> float:
    """Token-weighted mean cross-entropy over a corpus."""
    total, n = 0.0, 0
    for s in sequences:
        toks = s.tokens if isinstance(s, TokenSequence) else list(s)
        k = len(supervised_positions(toks))
        loss = _mlp_eval_loss(model, toks) if isinstance(model, ContextMLP) else ce_loss(model, toks)[0]
        total += loss * k
        n += k
    return total / n


def _mlp_eval_loss(model: ContextMLP, toks) -> float:
    pos = list(supervised_positions(toks))
    probs = model.batch_state_probs([model.window(toks[:k]) for k in pos])
    return float(-np.log(probs[np.arange(len(pos)), [toks[k] for k in pos]]).mean())


def conditional_entropy(model: CountModel) -> float:
    """Empirical conditional entropy of the full-history count tables over supervised positions.

    Computed directly from the counts (sum of -p log p weighted by context frequency),
    independently of the model's probability path.
    """
    if model.order != 0:
        raise PlannerError("defined here for full-history count models")
    total, n = 0.0, 0
    seen = {}
    for seq in model.corpus:
        state = model.init_state([])
        start = codec.context_length(seq)
        for k, tok in enumerate(seq):
            if k >= start:
                key = ("h", state.length, state.prefix_hash)
                seen.setdefault(key, 0)
                seen[key] += 1
            state = model.step_state(state, tok)
    for key, visits in seen.items():
        row = model.tables[key]
        tot = sum(row.values())
        h = -sum((c / tot) * math.log(c / tot) for c in row.values())
        total += visits * h
        n += visits
    return total / n


@dataclass
class PlannerTrainConfig:
    steps: int = 2000
    lr: float = 0.002
    batch: int = 64
    seed: int = 0
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9
    clip: float = 5.0


def _positions(sequences) -> list[tuple[int, int]]:
    out = []
    for i, s in enumerate(sequences):
        out += [(i, k) for k in supervised_positions(s)]
    return out


def train(model: NextTokenModel, sequences, cfg: PlannerTrainConfig | None = None):
    """Fit a planner model; returns (model, loss curve).

    Count models take one counting pass and report the corpus loss before (uniform)
    and after fitting.  The MLP is trained with teacher forcing on windows ending at
    supervised positions, drawn by a seeded generator.
    """
    cfg = cfg or PlannerTrainConfig()
    seqs = [s.tokens if isinstance(s, TokenSequence) else list(map(int, s)) for s in sequences]
    if not seqs:
        raise PlannerError("empty corpus")
    for k, s in enumerate(seqs):
        try:
            codec.validate_sequence(s)
        except CodecError as e:
            raise PlannerError(f"sequence {k}: {e}") from None
    if isinstance(model, CountModel):
        model.fit(seqs)
        return model, [math.log(model.vocab_size), corpus_loss(model, seqs)]
    if not isinstance(model, ContextMLP):
        raise PlannerError(f"cannot train model kind {model.kind!r}")
    pos = _positions(seqs)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, clip=cfg.clip) if cfg.optimizer == "adam" else MomentumSGD(cfg.lr, cfg.momentum, cfg.clip)
    curve = []
    for step_i in range(cfg.steps):
        pick = rng.integers(0, len(pos), size=cfg.batch)
        windows = np.array([model.window(seqs[pos[j][0]][:pos[j][1]]) for j in pick])
        targets = np.array([seqs[pos[j][0]][pos[j][1]] for j in pick])
        ref = {k: v.astype(np.float64) for k, v in model.params.items()}
        loss, grads = model.loss_and_grads(windows, targets, ref)
        if not math.isfinite(loss):
            raise PlannerError(f"non-finite loss at step {step_i}")
        opt.step(model.params, grads)
        curve.append(loss)
    return model, curve


def top1_accuracy(model: NextTokenModel, sequences) -> float:
    hits, n = 0, 0
    for s in sequences:
        toks = s.tokens if isinstance(s, TokenSequence) else list(s)
        pos = list(supervised_positions(toks))
        states = [model.init_state(toks[:k]) for k in pos]
        probs = model.batch_state_probs(states)
        pred = probs.argmax(axis=1)
        hits += int((pred == np.array([toks[k] for k in pos])).sum())
        n += len(pos)
    return hits / n


# ---------------------------------------------------------------- grammars for decoding

class CodecGrammar:
    """Adapter exposing the interleaved sequence grammar to the decoder."""

    def init(self, prefix):
        return codec.parse_prefix(prefix)

    def advance(self, state, tok):
        return codec.advance(state, tok)

    def mask(self, state):
        return codec.allowed_mask(state)

    def finished(self, state) -> bool:
        return codec.is_complete(state)


class FreeGrammar:
    """Any token until `end`; sequences are forced to end by `max_len` new tokens."""

    def __init__(self, vocab_size: int, end: int, max_len: int):
        self.vocab_size, self.end, self.max_len = vocab_size, end, max_len

    def init(self, prefix):
        return (0, False)

    def advance(self, state, tok):
        n, done = state
        if done or (n + 1 == self.max_len and tok != self.end):
            return None
        return (n + 1, tok == self.end)

    def mask(self, state):
        n, done = state
        m = np.zeros(self.vocab_size, dtype=bool)
        if done:
            return m
        if n + 1 == self.max_len:
            m[self.end] = True
        else:
            m[:] = True
        return m

    def finished(self, state) -> bool:
        return state[1]


# ---------------------------------------------------------------- beam search

@dataclass
class BeamConfig:
    width: int = 4
    max_new_tokens: int = codec.MAX_SEQ_LEN

    def __post_init__(self):
        if self.width < 1:
            raise PlannerError("beam width must be >= 1")


@dataclass
class _Cand:
    logp: float
    toks: tuple[int, ...]
    gstate: Any
    done: bool
    mstate: Any = None
    parent: Any = None  # model state before the last token, until materialised


def _rank(c: _Cand):
    return (-c.logp, c.toks)


def beam_search(model: NextTokenModel, prefix: Sequence[int], cfg: BeamConfig | None = None,
                grammar=None) -> list[int]:
    """Highest-probability grammar-valid continuation of `prefix`; returns prefix + new tokens.

    Scores are raw sums of log-probabilities of the mask-renormalised distributions.
    Finished candidates stay in the pool and compete with live ones; the search ends
    once every candidate in the top-B is finished.  Equal scores are broken in favour
    of the lexicographically smaller token sequence.
    """
    cfg = cfg or BeamConfig()
    grammar = grammar or CodecGrammar()
    prefix = [int(t) for t in prefix]
    try:
        g0 = grammar.init(prefix)
    except CodecError as e:
        raise PlannerError(str(e)) from None
    beam = [_Cand(0.0, (), g0, grammar.finished(g0), model.init_state(prefix))]
    for _ in range(cfg.max_new_tokens):
        live = [c for c in beam if not c.done]
        if not live:
            break
        probs = model.batch_state_probs([c.mstate for c in live])
        pool = [c for c in beam if c.done]
        for c, p in zip(live, probs):
            q = np.where(grammar.mask(c.gstate), p, 0.0)
            total = q.sum()
            if total <= 0:
                continue  # no mass on any legal token: the candidate dies
            q = q / total
            allowed = np.flatnonzero(q > 0)
            # top-B by probability, smaller id first on ties
            for tok in allowed[np.lexsort((allowed, -q[allowed]))][:cfg.width]:
                tok = int(tok)
                g = grammar.advance(c.gstate, tok)
                if g is not None:
                    pool.append(_Cand(c.logp + math.log(q[tok]), c.toks + (tok,), g, grammar.finished(g),
                                      parent=c.mstate))
        if not pool:
            raise BeamError("every candidate reached a dead end", prefix)
        pool.sort(key=_rank)
        beam = pool[:cfg.width]
        for c in beam:
            if c.mstate is None:
                c.mstate = model.step_state(c.parent, c.toks[-1])
                c.parent = None
    finished = [c for c in beam if c.done]
    if not finished:
        best = min(beam, key=_rank)
        raise BeamError(f"no finished candidate within {cfg.max_new_tokens} new tokens", prefix + list(best.toks))
    return prefix + list(min(finished, key=_rank).toks)


def sequence_logprob(model: NextTokenModel, prefix: Sequence[int], new: Sequence[int], grammar=None) -> float:
    """Log-probability of `new` after `prefix` under the mask-renormalised model."""
    grammar = grammar or CodecGrammar()
    g = grammar.init(list(prefix))
    s = model.init_state(list(prefix))
    total = 0.0
    for tok in new:
        p = np.where(grammar.mask(g), model.state_probs(s), 0.0)
        if p.sum() <= 0 or p[tok] <= 0:
            return -math.inf
        total += math.log(p[tok] / p.sum())
        g = grammar.advance(g, tok)
        s = model.step_state(s, tok)
    return total


# ---------------------------------------------------------------- plans

def decode_plan(sequence, start_stage: int = 0) -> list[PlanStep]:
    """Split a grammar-valid sequence into PlanSteps (subtask text and both goal rasters)."""
    toks = sequence.tokens if isinstance(sequence, TokenSequence) else list(sequence)
    if isinstance(sequence, TokenSequence) and start_stage == 0:
        start_stage = sequence.start_stage
    codec.validate_sequence(toks)
    k = codec.context_length(toks)
    steps = []
    while toks[k] == BOT:
        end = toks.index(EOT, k)
        text = codec.detokenize_text(toks[k + 1:end])
        h0 = end + 2
        head = codec.detokenize_raster(toks[h0:h0 + IMAGE_TOKENS], 0)
        w0 = h0 + IMAGE_TOKENS + 2
        wrist = codec.detokenize_raster(toks[w0:w0 + IMAGE_TOKENS], 1)
        steps.append(PlanStep(text, head, wrist, start_stage + len(steps)))
        k = w0 + IMAGE_TOKENS + 2  # past EOI and STAGE_END
    return steps


def plan_prefix(head: np.ndarray, wrist: np.ndarray, instruction: str, history: Sequence[PlanStep] = ()) -> list[int]:
    toks = codec.context_tokens(head, wrist, instruction)
    for st in history:
        toks += codec.stage_tokens(st.subtask, st.head, st.wrist)
    return toks


def plan_task(model: NextTokenModel, head: np.ndarray, wrist: np.ndarray, instruction: str, beam: int = 4,
              history: Sequence[PlanStep] = ()) -> list[PlanStep]:
    """Decode the remaining plan from an observation and instruction (plus consumed steps)."""
    prefix = plan_prefix(head, wrist, instruction, history)
    full = beam_search(model, prefix, BeamConfig(width=beam))
    return decode_plan(full, 0)[len(history):]
