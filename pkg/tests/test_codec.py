import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from goalplan import codec
from goalplan import toyworld as tw
from goalplan.codec import CodecError
from goalplan.milestone import label_episode

PALETTE = sorted(tw.PALETTE)


@pytest.fixture(scope="module")
def labeled():
    out = []
    for s in tw.gen_scenarios("in_domain", 12, 4):
        ep = tw.scripted_expert(s)
        out.append((ep, label_episode(ep)))
    return out


def random_raster(rng):
    return rng.choice(PALETTE, size=(16, 16))


def test_layout_partition():
    kinds = [codec.token_kind(t) for t in range(codec.VOCAB_SIZE)]
    assert kinds.count("control") == 16 and kinds.count("text") == 2048 and kinds.count("image") == 64
    assert codec.VOCAB_SIZE == 2128 and codec.IMAGE_START == 2064
    assert max(tw.PALETTE) < 64
    with pytest.raises(CodecError):
        codec.token_kind(codec.VOCAB_SIZE)


def test_text_examples():
    ids = codec.tokenize_text("Approach the apple")
    assert len(ids) == 3 and all(codec.token_kind(t) == "text" for t in ids)
    assert codec.detokenize_text(ids) == "approach the apple"
    assert codec.tokenize_text("") == [] and codec.detokenize_text([]) == ""
    oov = codec.tokenize_text("zxqv")
    assert len(oov) == 4 and all(t >= codec.WORD_END for t in oov)
    assert codec.detokenize_text(oov) == "zxqv"


@given(st.text(max_size=60))
def test_text_round_trip_property(s):
    assert codec.detokenize_text(codec.tokenize_text(s)) == codec.normalize_text(s)


def test_text_round_trip_adjacent_oov_words():
    s = "qqq zzz apple xkcd"
    assert codec.detokenize_text(codec.tokenize_text(s)) == s


def test_raster_round_trip_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = random_raster(rng)
        ids = codec.tokenize_raster(r)
        assert len(ids) == 256 and all(codec.token_kind(t) == "image" for t in ids)
        assert np.array_equal(codec.detokenize_raster(ids, 1), r)


def test_raster_examples_and_errors():
    ids = codec.tokenize_raster(np.zeros((16, 16), dtype=int))
    assert ids == [2064] * 256
    bad = list(ids)
    bad[7] = 20
    with pytest.raises(CodecError, match="position 7 not an image token"):
        codec.detokenize_raster(bad)
    with pytest.raises(CodecError):
        codec.detokenize_raster(ids[:10])


def test_assemble_length_formula(labeled):
    ep, plan = labeled[0]
    seq = codec.assemble(ep, plan, 0)
    n_instr = len(codec.tokenize_text(plan.instruction))
    n_texts = sum(len(codec.tokenize_text(t)) for t in plan.texts)
    expected = 1 + 2 * 258 + (2 + n_instr) + sum(2 + 2 * 258 + 1 for _ in plan.segments) + n_texts + 1
    assert len(seq.tokens) == expected
    codec.validate_sequence(seq.tokens)


def test_assemble_formula_three_word_texts(labeled):
    # 3 stages of 3-word subtasks and a 3-word instruction give 2,089 tokens
    ep, plan = labeled[0]
    from goalplan.milestone import MilestonePlan, Segment

    segs = tuple(Segment("open the box", s.from_frame, s.to_frame, s.goal_frames, s.skill_id) for s in plan.segments)
    seq = codec.assemble(ep, MilestonePlan(segs, "put it away"), 0)
    assert len(seq.tokens) == 2089


def test_assemble_tail_window(labeled):
    ep, plan = labeled[1]
    seq = codec.assemble(ep, plan, len(plan) - 1)
    assert seq.tokens.count(codec.STAGE_END) == 1 and seq.tokens[-1] == codec.SEQ_END
    with pytest.raises(CodecError):
        codec.assemble(ep, plan, len(plan))


def test_assembled_sequences_valid_and_within_budget(labeled):
    rng = np.random.default_rng(1)
    for ep, plan in labeled:
        for _ in range(5):
            seq = codec.sample_sequence(ep, plan, rng)
            assert codec.is_valid_sequence(seq.tokens)
            assert len(seq.tokens) <= codec.MAX_SEQ_LEN
            n_img = seq.tokens.count(codec.BOI_HEAD) + seq.tokens.count(codec.BOI_WRIST)
            assert n_img <= codec.MAX_IMAGES


def test_sample_window_properties(labeled):
    ep, plan = labeled[2]
    rng = np.random.default_rng(3)
    goals = [s.goal_frames[0] for s in plan.segments]
    seen = set()
    for _ in range(10000):
        t, stage = codec.sample_window(ep, plan, rng)
        assert min(abs(t - g) for g in goals) <= 10
        assert stage == plan.stage_of(t)
        seen.add(stage)
    assert seen == set(range(len(plan)))


def test_sample_window_single_stage(labeled):
    from goalplan.milestone import MilestonePlan, Segment

    ep, _ = labeled[0]
    n = len(ep) - 1
    plan = MilestonePlan((Segment("Approach the apple", 0, n, (n, n), 0),), ep.instruction)
    rng = np.random.default_rng(0)
    assert {codec.sample_window(ep, plan, rng)[1] for _ in range(200)} == {0}


def test_assemble_overflow_error(labeled):
    from goalplan.milestone import MilestonePlan, Segment

    ep, _ = labeled[0]
    bounds = list(range(0, 9 * 3, 3))
    segs = tuple(Segment("a", lo, hi, (hi, hi), 0) for lo, hi in zip(bounds, bounds[1:]))
    with pytest.raises(CodecError, match="budget"):
        codec.assemble(ep, MilestonePlan(segs, "x"), 0)


def test_grammar_rejects_control_mutations(labeled):
    rng = np.random.default_rng(9)
    ep, plan = labeled[3]
    base = codec.assemble(ep, plan, 0).tokens
    ctrl_pos = [i for i, t in enumerate(base) if t < codec.N_CONTROL]
    rejected = 0
    legal_image_swaps = 0
    for _ in range(1000):
        seq = list(base)
        if rng.random() < 0.5:
            i = int(rng.choice(ctrl_pos))
            new = int(rng.integers(codec.VOCAB_SIZE))
        else:
            i = int(rng.integers(len(seq)))
            new = int(rng.integers(codec.N_CONTROL))
        if new == seq[i]:
            new = (new + 1) % codec.N_CONTROL
        old, seq[i] = seq[i], new
        if codec.is_valid_sequence(seq):
            assert codec.token_kind(old) == codec.token_kind(new) == "image"
            legal_image_swaps += 1
        else:
            rejected += 1
    assert rejected >= 990


def test_file_round_trip(tmp_path, labeled):
    rng = np.random.default_rng(2)
    seqs = [codec.sample_sequence(ep, plan, rng).tokens for ep, plan in labeled for _ in range(8)][:100]
    p = tmp_path / "s.vstq"
    codec.write_sequences(p, seqs)
    assert codec.read_sequences(p) == seqs
    raw = p.read_bytes()
    assert raw[:4] == b"VSTQ" and struct.unpack_from("<H", raw, 4)[0] == codec.FORMAT_VERSION
    assert raw[6:14] == codec.layout_digest() and struct.unpack_from("<I", raw, 14)[0] == len(seqs)


def test_file_errors(tmp_path, labeled):
    ep, plan = labeled[0]
    p = tmp_path / "s.vstq"
    codec.write_sequences(p, [codec.assemble(ep, plan).tokens])
    raw = p.read_bytes()
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(CodecError, match="magic"):
        codec.read_sequences(tmp_path / "empty")
    flipped = bytearray(raw)
    flipped[8] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(CodecError, match="vocabulary layout mismatch"):
        codec.read_sequences(tmp_path / "flip")
    (tmp_path / "trunc").write_bytes(raw[:-5])
    with pytest.raises(CodecError, match="byte offset"):
        codec.read_sequences(tmp_path / "trunc")
    with pytest.raises(CodecError):
        codec.write_sequences(tmp_path / "bad", [[codec.BOS, codec.SEQ_END]])


def test_layout_export(tmp_path):
    import json

    codec.export_layout(tmp_path / "layout.json")
    table = json.loads((tmp_path / "layout.json").read_text())
    assert table["vocab_size"] == 2128 and table["image"]["start"] == 2064
