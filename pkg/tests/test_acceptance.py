"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line in the terminal summary.

The policy criteria train full-size policies and take about 30 minutes together;
select the fast ones with  -k "not in_domain_policy and not novel_goal".
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from oracles import (GREEDY_TRAP, GREEDY_TRAP_GRAMMAR, brute_rdp, exhaustive_argmax, finite_difference_check,
                     random_count_model, random_picks, random_polylines)

from goalplan import codec
from goalplan import toyworld as tw
from goalplan.cli import DEFAULTS, main, packed_sequences
from goalplan.codec import CodecError
from goalplan.executor import ExecutorConfig, FlowActor, evaluate, summary
from goalplan.milestone import label_episodes, rdp_simplify
from goalplan.planner import (BeamConfig, ContextMLP, CountModel, FreeGrammar, PlannerTrainConfig, beam_search,
                              sequence_logprob, top1_accuracy, train)
from goalplan.policy import (CHUNK, CHUNK_DIM, Conditioning, FlowPolicy, TrainConfig, build_dataset, flow_loss,
                             make_flow_sample, offset_goal, pad_chunk, sample_chunk, train_policy)

PALETTE = sorted(tw.PALETTE)
TRAIN_SEED = 7
N_TRAIN = 500
WINDOW = 5


def _labeled(n, seed):
    eps = [tw.scripted_expert(s) for s in tw.gen_scenarios("in_domain", n, seed)]
    return list(zip(eps, label_episodes(eps)))


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "polyline simplification matches the recursive oracle")
def test_rdp_matches_oracle(note):
    t = time.perf_counter()
    cases = list(random_polylines(200, seed=0))
    bad = sum(rdp_simplify(pts, eps) != brute_rdp(pts, eps) for pts, eps in cases)
    dt = time.perf_counter() - t
    note(f"{len(cases) - bad}/{len(cases)} exact, {dt:.2f} s")
    assert bad == 0 and dt < 5


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "full-width beam equals exhaustive argmax")
def test_beam_optimality(note):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(50):
        v = int(rng.integers(2, 6))
        L = int(rng.integers(1, 7))
        m = random_count_model(rng, v)
        out = beam_search(m, [], BeamConfig(width=v ** L), FreeGrammar(v, v - 1, L))
        bad += out != exhaustive_argmax(m, v, v - 1, L)[0]
    g = FreeGrammar(**GREEDY_TRAP_GRAMMAR)
    greedy = beam_search(GREEDY_TRAP, [], BeamConfig(width=1), g)
    wide = beam_search(GREEDY_TRAP, [], BeamConfig(width=2), g)
    trap_ok = (greedy == [0, 0, 2] and wide == [1, 2]
               and math.isclose(math.exp(sequence_logprob(GREEDY_TRAP, [], wide, g)), 0.36)
               and exhaustive_argmax(GREEDY_TRAP, 3, 2, 3)[0] == wide)
    dt = time.perf_counter() - t
    note(f"{50 - bad}/50 exact, greedy trap {'ok' if trap_ok else 'wrong'}, {dt:.1f} s")
    assert bad == 0 and trap_ok and dt < 30


# ---------------------------------------------------------------- 3

def _cond(rng):
    head, wrist = rng.choice(PALETTE, size=(2, 16, 16))
    gh, gw = rng.choice(PALETTE, size=(2, 16, 16))
    return Conditioning.build((head, wrist), (gh, gw), "Pick up the apple", tuple(rng.uniform(0, 1, 4)))


@pytest.mark.criterion(3, "analytic gradients match central differences")
def test_gradient_checks(note):
    t = time.perf_counter()
    rng = np.random.default_rng(3)

    mlp = ContextMLP(seed=0)
    p64 = {k: v.astype(np.float64) for k, v in mlp.params.items()}
    windows = rng.integers(0, mlp.vocab_size, size=(16, mlp.context))
    targets = rng.integers(0, mlp.vocab_size, size=16)
    _, grads = mlp.loss_and_grads(windows, targets, p64)
    picks = random_picks(p64, rng, 60, rows={"embed": np.unique(windows)})
    err_mlp = finite_difference_check(lambda p: mlp.loss_and_grads(windows, targets, p)[0], p64, grads, picks)

    pol = FlowPolicy(seed=1)
    q64 = {k: v.astype(np.float64) for k, v in pol.params.items()}
    parts = pol._cond_parts([_cond(np.random.default_rng(k)) for k in range(6)])
    x = rng.standard_normal((6, CHUNK_DIM))
    tau = rng.uniform(0, 0.95, 6)
    v = rng.standard_normal((6, CHUNK_DIM))
    _, grads, _ = pol.loss_and_grads(x, parts, tau, v, q64)
    picks = random_picks(q64, rng, 60, rows={"embed": np.unique(parts[3][parts[4] > 0])})
    err_pol = finite_difference_check(lambda p: pol.loss_and_grads(x, parts, tau, v, p)[0], q64, grads, picks)
    dt = time.perf_counter() - t
    note(f"max rel err planner {err_mlp:.1e}, policy {err_pol:.1e} (60 params each), {dt:.1f} s")
    assert err_mlp <= 1e-4 and err_pol <= 1e-4 and dt < 60


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4, "flow interpolation, sampler and loss identities")
def test_flow_identities(note):
    rng = np.random.default_rng(4)
    ends = 0
    for _ in range(10000):
        a = rng.uniform(-1, 1, CHUNK_DIM).astype(np.float32)
        s0 = make_flow_sample(a, None, rng, tau=0.0)
        s1 = make_flow_sample(a, None, rng, tau=1.0, z=s0.z)
        ends += np.array_equal(s0.x_tau, s0.z) and np.array_equal(s1.x_tau, a)
    errs = []
    for steps in (1, 5, 10):
        z = rng.standard_normal(CHUNK_DIM).astype(np.float32)
        a = rng.uniform(-0.1, 0.1, CHUNK_DIM).astype(np.float32)
        errs.append(float(np.abs(sample_chunk(lambda x, c, t: a - z, None, steps=steps, z=z).ravel() - a).max()))
    zeros = [make_flow_sample(np.zeros(CHUNK_DIM, dtype=np.float32), None, rng) for _ in range(10000)]
    loss = flow_loss(lambda x, c, t: np.zeros(CHUNK_DIM), zeros)[0]
    note(f"endpoints {ends}/10000, sampler err {max(errs):.1e}, zero-predictor loss {loss:.2f}")
    assert ends == 10000 and max(errs) <= 1e-6 and abs(loss - 120) <= 0.05 * 120


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "padding and goal-offset properties")
def test_padding_and_offsets(note):
    rng = np.random.default_rng(5)
    pad_ok = 0
    for _ in range(1000):
        t = int(rng.integers(0, 200))
        boundary = t + int(rng.integers(0, 60))
        raw = rng.uniform(-0.1, 0.1, (CHUNK, 4)).astype(np.float32)
        out = pad_chunk(raw, t, boundary)
        k = min(boundary - t, CHUNK)
        pad_ok += (np.array_equal(out[:k], raw[:k]) and not out[k:].view(np.uint32).any()
                   and np.array_equal(pad_chunk(out, t, boundary), out))

    plans = [p for _, p in _labeled(12, 4)]
    off_ok = 0
    for _ in range(10000):
        plan = plans[int(rng.integers(len(plans)))]
        stage = int(rng.integers(len(plan)))
        seg = plan.segments[stage]
        t = int(rng.integers(seg.from_frame, seg.to_frame + 1))
        g, eff = offset_goal(t, stage, plan, WINDOW, rng)
        off_ok += eff in (stage, stage + 1) and abs(g - plan.segments[eff].to_frame) <= WINDOW

    first = plans[0].segments[0]
    hits = sum(offset_goal(first.to_frame, 0, plans[0], WINDOW, rng)[1] == 1 for _ in range(10000))
    note(f"pad {pad_ok}/1000, offsets {off_ok}/10000 within W, relabel rate {hits / 10000:.4f}")
    assert pad_ok == 1000 and off_ok == 10000 and abs(hits / 10000 - 0.5) <= 0.02


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "codec round trips, grammar validity and file errors")
def test_codec(note, tmp_path):
    rng = np.random.default_rng(6)
    alphabet = list("abcdefghijklmnopqrstuvwxyz  0123456789.,'-") + ["pick", " up", " the", " apple", " plate"]
    text_ok = raster_ok = 0
    for _ in range(1000):
        s = "".join(rng.choice(alphabet, size=int(rng.integers(0, 40))))
        text_ok += codec.detokenize_text(codec.tokenize_text(s)) == codec.normalize_text(s)
        r = rng.choice(PALETTE, size=(16, 16))
        raster_ok += np.array_equal(codec.detokenize_raster(codec.tokenize_raster(r)), r)

    pool = []
    for ep, plan in _labeled(12, 6):
        pool.append(codec.assemble(ep, plan).tokens)
        pool += [codec.sample_sequence(ep, plan, rng).tokens for _ in range(4)]
    valid = sum(codec.is_valid_sequence(s) for s in pool)
    file_ok = 0
    path = tmp_path / "s.vstq"
    for _ in range(1000):
        seqs = [pool[int(i)] for i in rng.integers(0, len(pool), size=int(rng.integers(1, 4)))]
        codec.write_sequences(path, seqs)
        file_ok += codec.read_sequences(path) == seqs

    raw = path.read_bytes()
    errors = 0
    flipped = bytearray(raw)
    flipped[8] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(CodecError, match="vocabulary layout mismatch"):
        codec.read_sequences(tmp_path / "flip")
    errors += 1
    (tmp_path / "trunc").write_bytes(raw[:-7])
    with pytest.raises(CodecError, match="byte offset"):
        codec.read_sequences(tmp_path / "trunc")
    errors += 1
    note(f"text {text_ok}/1000, raster {raster_ok}/1000, file {file_ok}/1000, "
         f"valid {valid}/{len(pool)}, error paths {errors}/2")
    assert text_ok == raster_ok == file_ok == 1000 and valid == len(pool)


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "planner memorisation and held-out next-token accuracy")
def test_planner_memorisation(note):
    t = time.perf_counter()
    eps = []
    for ep, plan in _labeled(17, 0):
        ep.milestones = plan
        eps.append(ep)
    seqs = [s.tokens for s in packed_sequences(eps, DEFAULTS)][:50]
    m = CountModel(order=0, alpha=0.0).fit(seqs)
    exact = sum(beam_search(m, s[:codec.context_length(s)], BeamConfig(width=1)) == s for s in seqs)

    pairs = _labeled(10, 5)
    rng = np.random.default_rng(0)
    corpus = []
    for ep, plan in pairs:
        corpus.append(codec.assemble(ep, plan))
        corpus += [codec.sample_sequence(ep, plan, rng) for _ in range(8)]
    seen = {tuple(s.tokens) for s in corpus}
    rng = np.random.default_rng(1)
    held = [q for ep, plan in pairs for q in (codec.sample_sequence(ep, plan, rng) for _ in range(10))
            if tuple(q.tokens) not in seen]
    mlp, _ = train(ContextMLP(seed=0), corpus, PlannerTrainConfig(steps=2000, lr=0.002, batch=64, seed=0))
    acc = top1_accuracy(mlp, held)
    dt = time.perf_counter() - t
    note(f"count model {exact}/{len(seqs)} exact, MLP held-out top-1 {acc:.3f} on {len(held)} windows, {dt:.0f} s")
    assert exact == len(seqs) == 50 and acc >= 0.90 and dt < 600


# ---------------------------------------------------------------- 8, 9

def _train(pairs, use_goal: bool):
    ds = build_dataset(pairs, window=WINDOW, seed=0)
    pol, _ = train_policy(FlowPolicy(seed=0, use_goal=use_goal), ds, TrainConfig(seed=0))
    return pol


@pytest.fixture(scope="module")
def goal_policy():
    t = time.perf_counter()
    pol = _train(_labeled(N_TRAIN, TRAIN_SEED), use_goal=True)
    return pol, time.perf_counter() - t


@pytest.mark.criterion(8, "in-domain success with ground-truth plans")
def test_in_domain_policy(note, goal_policy):
    pol, t_train = goal_policy
    t = time.perf_counter()
    held = tw.gen_scenarios("in_domain", N_TRAIN + 100, TRAIN_SEED)[N_TRAIN:]
    row = summary(evaluate({"flow": FlowActor(pol)}, {"held": held}, ExecutorConfig(rollouts=1)), "flow", "held")
    dt = t_train + time.perf_counter() - t
    note(f"success {row['success']:.3f} (approach {row['approach']:.3f}) over {row['n']} rollouts, "
         f"{dt / 60:.1f} min; target 0.90")
    assert row["success"] >= 0.90 and dt <= 15 * 60


def test_policy_reproduces_training_chunks(goal_policy):
    pol = goal_policy[0]
    ds = build_dataset(_labeled(20, TRAIN_SEED), window=WINDOW, seed=0)
    rng = np.random.default_rng(0)
    close = []
    for i in rng.choice(len(ds), 300, replace=False):
        chunk = sample_chunk(pol, ds.conditioning(int(i)), rng=rng)
        close.append(np.linalg.norm(chunk - ds.target[i], axis=1) <= 0.02)
    assert np.mean(close) >= 0.80


@pytest.mark.criterion(9, "goal images beat language only on novel scenarios")
def test_novel_goal_vs_language_only(note, goal_policy):
    no_goal = _train(_labeled(N_TRAIN, TRAIN_SEED), use_goal=False)
    novel = tw.gen_scenarios("novel", 63, TRAIN_SEED)
    rows = evaluate({"goal": FlowActor(goal_policy[0]), "language": FlowActor(no_goal)}, {"novel": novel},
                    ExecutorConfig(rollouts=3))
    g, lang = summary(rows, "goal", "novel"), summary(rows, "language", "novel")
    note(f"success {g['success']:.3f} vs {lang['success']:.3f}, "
         f"approach {g['approach']:.3f} vs {lang['approach']:.3f} over {g['n']} rollouts each")
    assert g["success"] - lang["success"] >= 0.20 and g["approach"] >= lang["approach"]


# ---------------------------------------------------------------- 10

SMOKE = {
    "seed": 0,
    "world": {"count": 40, "eval_sets": ["in_domain:20:40", "novel:10"]},
    "policy": {"steps": 5000},
}


def _smoke(root: Path, config: Path) -> None:
    def run(*argv):
        assert main([str(a) for a in argv]) == 0, argv

    run("gen-data", "--out", root / "eps", "--config", config)
    run("label", "--in", root / "eps", "--out", root / "lab", "--config", config)
    run("pack", "--in", root / "lab", "--out", root / "seq" / "train.vstq", "--config", config)
    run("train-wm", "--data", root / "seq" / "train.vstq", "--out", root / "wm", "--config", config)
    run("train-policy", "--data", root / "lab", "--out", root / "pol", "--config", config)
    run("plan", "--model", root / "wm" / "planner.vstm", "--episode", root / "lab" / "ep_00000.json",
        "--out", root / "plan", "--config", config)
    run("rollout", "--policy", root / "pol" / "policy.vstm", "--planner", root / "wm" / "planner.vstm",
        "--scenario", "in_domain:0", "--out", root / "roll" / "log.jsonl", "--config", config)
    run("eval", "--policies", f"flow={root / 'pol' / 'policy.vstm'}", "--out", root / "eval", "--config", config)


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "config.json"}


@pytest.mark.criterion(10, "full pipeline runs and bit-reproduces from its emitted config")
def test_full_stack_smoke(note, tmp_path):
    t = time.perf_counter()
    cfg = tmp_path / "smoke.json"
    cfg.write_text(json.dumps(SMOKE))
    _smoke(tmp_path / "a", cfg)
    _smoke(tmp_path / "b", tmp_path / "a" / "eval" / "config.json")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    same = sorted(k for k in a if b.get(k) == a[k])
    dt = time.perf_counter() - t
    note(f"{len(same)}/{len(a)} files identical on re-run, {dt / 60:.1f} min")
    assert a.keys() == b.keys() and len(same) == len(a) and dt <= 30 * 60
