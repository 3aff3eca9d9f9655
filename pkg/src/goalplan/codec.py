"""Unified discrete token representation for instructions, subtasks and rasters.

Vocabulary (2,128 ids):
    0..15       control tokens
    16..2063    text: 2,000 word slots then 48 character-fallback slots
    2064..2127  image: one slot per palette code (token = 2064 + code)

Sequence grammar:
    BOS  BOI_HEAD img*256 EOI  BOI_WRIST img*256 EOI  BOT text* EOT
         { BOT text* EOT  BOI_HEAD img*256 EOI  BOI_WRIST img*256 EOI  STAGE_END }*
    SEQ_END
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
import unicodedata
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .milestone import MilestonePlan
from .toyworld import GRID, PALETTE, Episode

BOS, SEQ_END, BOT, EOT, BOI_HEAD, BOI_WRIST, EOI, STAGE_END, PAD = range(9)
CONTROL_NAMES = ("BOS", "SEQ_END", "BOT", "EOT", "BOI_HEAD", "BOI_WRIST", "EOI", "STAGE_END", "PAD")
N_CONTROL = 16
N_WORDS = 2000
N_FALLBACK = 48
TEXT_START = N_CONTROL
WORD_END = TEXT_START + N_WORDS  # first fallback id
TEXT_END = WORD_END + N_FALLBACK  # exclusive
IMAGE_START = TEXT_END
N_IMAGE = 64
VOCAB_SIZE = IMAGE_START + N_IMAGE
IMAGE_TOKENS = GRID * GRID
MAX_SEQ_LEN = 16384
MAX_IMAGES = 16
CONTEXT_WINDOW_FRAMES = 10  # 1 s at 10 Hz

FALLBACK_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"
FALLBACK_BREAK = len(FALLBACK_CHARS)  # separates two adjacent out-of-vocabulary words

_BASE_WORDS = """
a an the and or of to in on onto into at by with from up down off over under near next above below
it its this that these those is are be put place pick grasp grab lift lower move push pull open close
approach adjust retreat rotate stack wipe slide hold release drop take bring carry set reach go stop
gripper hand arm robot table plate tray bowl box bin basket shelf drawer cabinet top bottom left right
front back middle center side edge corner away toward towards then after before while until first second
third last next again all each both other one two three four five six seven eight nine ten red green blue
yellow orange purple pink white black brown gray small large big little tall short round square soft hard
apple banana cup block bottle lemon mug sponge carrot can ball pear spoon brush tomato object item thing
fruit vegetable container tool toy cloth towel lid handle button knob door window floor kitchen sink
fold unfold pour fill empty clean tidy sort arrange place it them task done finish start
""".split()


def _word_list() -> list[str]:
    seen: dict[str, None] = {}
    for w in _BASE_WORDS:
        seen.setdefault(w, None)
    words = list(seen)
    # unused slots keep the layout at its fixed size; they can never match normalized input
    words += [f"<unused{k}>" for k in range(N_WORDS - len(words))]
    return words


WORDS = _word_list()
WORD_ID = {w: TEXT_START + i for i, w in enumerate(WORDS) if not w.startswith("<")}


class CodecError(ValueError):
    pass


def token_kind(tok: int) -> str:
    if 0 <= tok < N_CONTROL:
        return "control"
    if TEXT_START <= tok < TEXT_END:
        return "text"
    if IMAGE_START <= tok < VOCAB_SIZE:
        return "image"
    raise CodecError(f"token {tok} outside vocabulary of size {VOCAB_SIZE}")


def layout_table() -> dict:
    return {
        "vocab_size": VOCAB_SIZE,
        "control": {"start": 0, "end": N_CONTROL, "names": {n: i for i, n in enumerate(CONTROL_NAMES)}},
        "text": {
            "start": TEXT_START, "end": TEXT_END, "words": WORDS,
            "fallback_start": WORD_END, "fallback_chars": FALLBACK_CHARS, "fallback_break": WORD_END + FALLBACK_BREAK,
        },
        "image": {"start": IMAGE_START, "end": VOCAB_SIZE, "token_of_code": "start + palette_code"},
    }


def layout_digest() -> bytes:
    blob = json.dumps(layout_table(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()[:8]


def export_layout(path) -> None:
    with open(path, "w") as f:
        json.dump(layout_table(), f, indent=1, sort_keys=True)


# ---------------------------------------------------------------- text

def normalize_text(s: str) -> str:
    ascii_text = unicodedata.normalize("NFKD", s).encode("ascii", "ignore").decode("ascii")
    return " ".join(re.findall(r"[a-z0-9]+", ascii_text.lower()))


def tokenize_text(s: str) -> list[int]:
    out: list[int] = []
    prev_oov = False
    for w in normalize_text(s).split():
        wid = WORD_ID.get(w)
        if wid is not None:
            out.append(wid)
            prev_oov = False
            continue
        if prev_oov:
            out.append(WORD_END + FALLBACK_BREAK)
        out += [WORD_END + FALLBACK_CHARS.index(ch) for ch in w]
        prev_oov = True
    return out


def detokenize_text(ids: Sequence[int]) -> str:
    words: list[str] = []
    buf: list[str] = []
    for pos, t in enumerate(ids):
        t = int(t)
        if TEXT_START <= t < WORD_END:
            if buf:
                words.append("".join(buf))
                buf = []
            w = WORDS[t - TEXT_START]
            if w.startswith("<"):
                raise CodecError(f"position {pos}: token {t} is an unused word slot")
            words.append(w)
        elif WORD_END <= t < TEXT_END:
            k = t - WORD_END
            if k == FALLBACK_BREAK:
                if buf:
                    words.append("".join(buf))
                    buf = []
            elif k < len(FALLBACK_CHARS):
                buf.append(FALLBACK_CHARS[k])
            else:
                raise CodecError(f"position {pos}: token {t} is a reserved fallback slot")
        else:
            raise CodecError(f"position {pos} not a text token")
    if buf:
        words.append("".join(buf))
    return " ".join(words)


# ---------------------------------------------------------------- rasters

def tokenize_raster(r: np.ndarray) -> list[int]:
    grid = np.asarray(r)
    if grid.shape != (GRID, GRID):
        raise CodecError(f"raster must be {GRID}x{GRID}, got {grid.shape}")
    if not np.isin(grid, list(PALETTE)).all():
        raise CodecError("raster holds codes outside the palette")
    return (grid.ravel().astype(np.int64) + IMAGE_START).tolist()


def detokenize_raster(ids: Sequence[int], view_id: int = 0) -> np.ndarray:
    if view_id not in (0, 1):
        raise CodecError(f"view_id must be 0 (head) or 1 (wrist), got {view_id}")
    if len(ids) != IMAGE_TOKENS:
        raise CodecError(f"raster needs {IMAGE_TOKENS} tokens, got {len(ids)}")
    arr = np.asarray(ids, dtype=np.int64)
    bad = np.flatnonzero((arr < IMAGE_START) | (arr >= VOCAB_SIZE))
    if bad.size:
        raise CodecError(f"position {int(bad[0])} not an image token")
    codes = arr - IMAGE_START
    off = np.flatnonzero(~np.isin(codes, list(PALETTE)))
    if off.size:
        raise CodecError(f"position {int(off[0])} holds image code {int(codes[off[0]])} outside the palette")
    return codes.reshape(GRID, GRID).astype(np.int16)


# ---------------------------------------------------------------- grammar

# parse modes
_M_BOS, _M_BOI, _M_IMG, _M_EOI, _M_BOT, _M_TEXT, _M_SEND, _M_BETWEEN, _M_DONE = range(9)
HEAD, WRIST = 0, 1


@dataclass(frozen=True)
class GrammarState:
    mode: int = _M_BOS
    view: int = HEAD
    remaining: int = 0
    in_context: bool = True
    images: int = 0
    length: int = 0


def _min_completion(s: GrammarState) -> int:
    """Fewest tokens that finish a valid sequence from state s."""
    stage_tail = 2 * (IMAGE_TOKENS + 2) + 1  # two framed images + STAGE_END
    if s.mode == _M_DONE:
        return 0
    if s.mode == _M_BETWEEN:
        return 1
    if s.mode == _M_SEND:
        return 2
    if s.mode == _M_TEXT:
        return 1 + (1 if s.in_context else stage_tail + 1)
    if s.mode == _M_BOT:
        return 1 + _min_completion(GrammarState(_M_TEXT, in_context=s.in_context))
    # after the wrist EOI: context needs BOT EOT SEQ_END, a stage needs STAGE_END SEQ_END
    after_wrist = 3 if s.in_context else 2
    if s.mode == _M_EOI:
        return 1 + (IMAGE_TOKENS + 2 if s.view == HEAD else 0) + after_wrist
    if s.mode == _M_IMG:
        return s.remaining + 1 + (IMAGE_TOKENS + 2 if s.view == HEAD else 0) + after_wrist
    if s.mode == _M_BOI:
        return (IMAGE_TOKENS + 2) * (2 if s.view == HEAD else 1) + after_wrist
    return 1 + _min_completion(GrammarState(_M_BOI))  # _M_BOS


def _fits(s: GrammarState) -> bool:
    return s.length + _min_completion(s) <= MAX_SEQ_LEN and s.images <= MAX_IMAGES


def advance(s: GrammarState, tok: int) -> GrammarState | None:
    """Next parse state, or None when tok cannot follow s."""
    tok = int(tok)
    n = s.length + 1
    m = s.mode
    if m == _M_BOS:
        nxt = GrammarState(_M_BOI, HEAD, 0, True, 0, n) if tok == BOS else None
    elif m == _M_BOI:
        want = BOI_HEAD if s.view == HEAD else BOI_WRIST
        nxt = GrammarState(_M_IMG, s.view, IMAGE_TOKENS, s.in_context, s.images + 1, n) if tok == want else None
    elif m == _M_IMG:
        if not IMAGE_START <= tok < VOCAB_SIZE:
            return None
        r = s.remaining - 1
        nxt = GrammarState(_M_IMG if r else _M_EOI, s.view, r, s.in_context, s.images, n)
    elif m == _M_EOI:
        if tok != EOI:
            return None
        if s.view == HEAD:
            nxt = GrammarState(_M_BOI, WRIST, 0, s.in_context, s.images, n)
        elif s.in_context:
            nxt = GrammarState(_M_BOT, HEAD, 0, True, s.images, n)
        else:
            nxt = GrammarState(_M_SEND, HEAD, 0, False, s.images, n)
    elif m == _M_BOT:
        nxt = GrammarState(_M_TEXT, HEAD, 0, s.in_context, s.images, n) if tok == BOT else None
    elif m == _M_TEXT:
        if TEXT_START <= tok < TEXT_END:
            nxt = GrammarState(_M_TEXT, HEAD, 0, s.in_context, s.images, n)
        elif tok == EOT:
            nxt = (GrammarState(_M_BETWEEN, HEAD, 0, False, s.images, n) if s.in_context
                   else GrammarState(_M_BOI, HEAD, 0, False, s.images, n))
        else:
            return None
    elif m == _M_SEND:
        nxt = GrammarState(_M_BETWEEN, HEAD, 0, False, s.images, n) if tok == STAGE_END else None
    elif m == _M_BETWEEN:
        if tok == BOT:
            if s.images + 2 > MAX_IMAGES:
                return None
            nxt = GrammarState(_M_TEXT, HEAD, 0, False, s.images, n)
        elif tok == SEQ_END:
            nxt = GrammarState(_M_DONE, HEAD, 0, False, s.images, n)
        else:
            return None
    else:
        return None
    if nxt is None or not _fits(nxt):
        return None
    return nxt


_TEXT_MASK = np.zeros(VOCAB_SIZE, dtype=bool)
_TEXT_MASK[TEXT_START:TEXT_END] = True
_IMAGE_MASK = np.zeros(VOCAB_SIZE, dtype=bool)
_IMAGE_MASK[IMAGE_START:] = True


def _single(*toks: int) -> np.ndarray:
    m = np.zeros(VOCAB_SIZE, dtype=bool)
    m[list(toks)] = True
    m.setflags(write=False)
    return m


_FIXED = {
    _M_BOS: _single(BOS), _M_EOI: _single(EOI), _M_BOT: _single(BOT), _M_SEND: _single(STAGE_END),
}
_TEXT_OR_EOT = _TEXT_MASK.copy()
_TEXT_OR_EOT[EOT] = True
for _m in (_TEXT_MASK, _IMAGE_MASK, _TEXT_OR_EOT):
    _m.setflags(write=False)


def allowed_mask(s: GrammarState) -> np.ndarray:
    """Boolean vector of tokens that extend s toward some valid full sequence."""
    if s.mode == _M_IMG:
        return _IMAGE_MASK
    if s.mode in _FIXED:
        return _FIXED[s.mode]
    if s.mode == _M_BOI:
        return _single(BOI_HEAD if s.view == HEAD else BOI_WRIST)
    if s.mode == _M_DONE:
        return np.zeros(VOCAB_SIZE, dtype=bool)
    # text and between-stage states can be budget-limited
    if s.mode == _M_TEXT:
        base = _TEXT_OR_EOT
        if advance(s, TEXT_START) is None:
            base = _single(EOT) if advance(s, EOT) is not None else np.zeros(VOCAB_SIZE, dtype=bool)
        return base
    if s.mode == _M_BETWEEN:
        toks = [t for t in (BOT, SEQ_END) if advance(s, t) is not None]
        return _single(*toks)
    raise CodecError(f"unknown grammar mode {s.mode}")


def parse_prefix(tokens: Sequence[int]) -> GrammarState:
    s = GrammarState()
    for pos, t in enumerate(tokens):
        nxt = advance(s, t)
        if nxt is None:
            raise CodecError(f"invalid prefix: token {int(t)} at position {pos} violates the sequence grammar")
        s = nxt
    return s


def grammar_mask(history: Sequence[int]) -> np.ndarray:
    return allowed_mask(parse_prefix(history))


def is_complete(s: GrammarState) -> bool:
    return s.mode == _M_DONE


def validate_sequence(tokens: Sequence[int]) -> None:
    s = parse_prefix(tokens)
    if not is_complete(s):
        raise CodecError(f"sequence of length {len(tokens)} ends before SEQ_END")


def is_valid_sequence(tokens: Sequence[int]) -> bool:
    try:
        validate_sequence(tokens)
    except CodecError:
        return False
    return True


# ---------------------------------------------------------------- assembly

@dataclass
class TokenSequence:
    tokens: list[int]
    start_stage: int = 0
    episode_id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def boundaries(self) -> list[int]:
        """Offsets of every STAGE_END token."""
        return [i for i, t in enumerate(self.tokens) if t == STAGE_END]

    def context_length(self) -> int:
        """Tokens up to and including the instruction's EOT (not supervised)."""
        return context_length(self.tokens)


def context_length(tokens: Sequence[int]) -> int:
    k = 1 + 2 * (IMAGE_TOKENS + 2)
    if len(tokens) <= k or tokens[k] != BOT:
        raise CodecError("sequence does not start with a context frame followed by BOT")
    try:
        return tokens.index(EOT, k) + 1 if isinstance(tokens, list) else list(tokens).index(EOT, k) + 1
    except ValueError:
        raise CodecError("instruction span is not terminated by EOT") from None


def _image_block(head: np.ndarray, wrist: np.ndarray) -> list[int]:
    return [BOI_HEAD, *tokenize_raster(head), EOI, BOI_WRIST, *tokenize_raster(wrist), EOI]


def context_tokens(head: np.ndarray, wrist: np.ndarray, instruction: str) -> list[int]:
    return [BOS, *_image_block(head, wrist), BOT, *tokenize_text(instruction), EOT]


def stage_tokens(text: str, head: np.ndarray, wrist: np.ndarray) -> list[int]:
    return [BOT, *tokenize_text(text), EOT, *_image_block(head, wrist), STAGE_END]


def assemble(episode: Episode, plan: MilestonePlan, start_stage: int = 0, start_frame: int | None = None) -> TokenSequence:
    if not 0 <= start_stage < len(plan):
        raise CodecError(f"start_stage {start_stage} outside [0, {len(plan)})")
    if start_frame is None:
        start_frame = plan.segments[start_stage].from_frame
    head, wrist = episode.rasters[start_frame]
    toks = context_tokens(head, wrist, plan.instruction or episode.instruction)
    stages = plan.segments[start_stage:]
    n_images = 2 + 2 * len(stages)
    if n_images > MAX_IMAGES:
        raise CodecError(f"window needs {n_images} images; the budget is {MAX_IMAGES}")
    for seg in stages:
        gh = episode.rasters[seg.goal_frames[0]][0]
        gw = episode.rasters[seg.goal_frames[1]][1]
        toks += stage_tokens(seg.subtask, gh, gw)
    toks.append(SEQ_END)
    if len(toks) > MAX_SEQ_LEN:
        raise CodecError(f"sequence needs {len(toks)} tokens; the budget is {MAX_SEQ_LEN}")
    return TokenSequence(toks, start_stage, episode.episode_id)


def sample_window(episode: Episode, plan: MilestonePlan, rng: np.random.Generator) -> tuple[int, int]:
    """Random (start frame, start stage) near a random goal frame."""
    seg = plan.segments[int(rng.integers(len(plan)))]
    g = seg.goal_frames[0]
    lo = max(0, g - CONTEXT_WINDOW_FRAMES)
    hi = min(len(episode) - 1, g + CONTEXT_WINDOW_FRAMES)
    t = int(rng.integers(lo, hi + 1))
    return t, plan.stage_of(t)


def sample_sequence(episode: Episode, plan: MilestonePlan, rng: np.random.Generator) -> TokenSequence:
    t, stage = sample_window(episode, plan, rng)
    return assemble(episode, plan, stage, t)


# ---------------------------------------------------------------- VSTQ files

MAGIC = b"VSTQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH8sI")


def write_sequences(path, sequences: Sequence) -> None:
    digest = layout_digest()
    seqs = [s.tokens if isinstance(s, TokenSequence) else list(s) for s in sequences]
    for k, s in enumerate(seqs):
        if not is_valid_sequence(s):
            raise CodecError(f"sequence {k} is not grammar-valid; refusing to write")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, digest, len(seqs)))
        for s in seqs:
            f.write(struct.pack("<I", len(s)))
            f.write(np.asarray(s, dtype="<u4").tobytes())


def read_sequences(path) -> list[list[int]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CodecError(f"bad magic at byte offset 0: expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise CodecError(f"truncated header at byte offset {len(data)}")
    _, version, digest, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported format version {version}")
    if digest != layout_digest():
        raise CodecError("vocabulary layout mismatch")
    off = _HEADER.size
    out = []
    for k in range(count):
        if off + 4 > len(data):
            raise CodecError(f"truncated file at byte offset {off}: sequence {k} length missing")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + 4 * n > len(data):
            raise CodecError(f"truncated file at byte offset {off}: sequence {k} needs {4 * n} bytes")
        out.append(np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64).tolist())
        off += 4 * n
    if off != len(data):
        raise CodecError(f"trailing bytes after byte offset {off}")
    return out
