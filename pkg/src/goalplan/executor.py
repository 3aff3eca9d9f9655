"""Closed-loop hierarchical execution: plan, act in partial chunks, switch stages, score."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .milestone import MilestonePlan, label_episode
from .planner import PlanStep, plan_task
from .policy import CHUNK, Conditioning, FlowPolicy, PolicyError, sample_chunk
from .toyworld import (
    OBJECT_CATEGORIES,
    Action,
    ScenarioDescriptor,
    WorldError,
    WorldState,
    q9,
    render,
    scripted_expert,
    step,
    success_metrics,
)

log = logging.getLogger(__name__)

CAUSES = ("aligned", "stopped", "timeout")
METRIC_COLUMNS = ("policy", "set", "category", "tablecloth", "approach", "success", "n")


class ExecutorError(ValueError):
    pass


@dataclass
class ExecutorConfig:
    execute_steps: int = 10
    waypoint_offsets: tuple[int, ...] = (5, 10)
    mode: str = "delta"  # delta | waypoint
    align_threshold: float = 0.03
    stop_threshold: float = 0.005
    stage_budget: int = 200
    plan_source: str = "ground-truth"  # ground-truth | world-model
    replan: bool = False
    beam: int = 1
    sample_steps: int = 10
    use_aligned: bool = True
    use_stop: bool = True
    rollouts: int = 3

    def __post_init__(self):
        self.waypoint_offsets = tuple(int(k) for k in self.waypoint_offsets)
        if not 1 <= self.execute_steps <= CHUNK:
            raise ExecutorError(f"execute_steps must be in [1, {CHUNK}], got {self.execute_steps}")
        if any(k < 1 or k > self.execute_steps for k in self.waypoint_offsets) or list(self.waypoint_offsets) != sorted(set(self.waypoint_offsets)):
            raise ExecutorError("waypoint offsets must be increasing and within execute_steps")
        if self.mode not in ("delta", "waypoint"):
            raise ExecutorError(f"unknown control mode {self.mode!r}")
        if self.plan_source not in ("ground-truth", "world-model"):
            raise ExecutorError(f"unknown plan source {self.plan_source!r}")
        if self.stage_budget < 1 or self.rollouts < 1 or self.beam < 1:
            raise ExecutorError("stage_budget, rollouts and beam must be positive")


def aligned(obs: Sequence[np.ndarray], goal: Sequence[np.ndarray], threshold: float) -> bool:
    """Fraction of differing cells over both views is at most `threshold`."""
    if len(obs) != len(goal):
        raise ExecutorError("view count mismatch")
    total = 0
    diff = 0
    for o, g in zip(obs, goal):
        o, g = np.asarray(o), np.asarray(g)
        if o.shape != g.shape:
            raise ExecutorError(f"raster shape mismatch {o.shape} vs {g.shape}")
        total += o.size
        diff += int(np.count_nonzero(o != g))
    return diff <= threshold * total


# ---------------------------------------------------------------- environment

class Env:
    """A scenario being played out; keeps every visited state."""

    def __init__(self, scenario: ScenarioDescriptor):
        self.scenario = scenario
        self.state = scenario.initial_state()
        self.states = [self.state]

    @property
    def t(self) -> int:
        return len(self.states) - 1

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        return render(self.state)

    def apply(self, action: Action) -> None:
        self.state = step(self.state, action)
        self.states.append(self.state)


@dataclass
class StageContext:
    env: Env
    stage: int
    plan_step: PlanStep
    rng: np.random.Generator


class Actor(Protocol):
    def reset(self, scenario: ScenarioDescriptor) -> None: ...

    def propose(self, cond: Conditioning, ctx: StageContext) -> np.ndarray: ...


class FlowActor:
    """Samples chunks from a trained FlowPolicy."""

    def __init__(self, policy: FlowPolicy, steps: int = 10):
        self.policy = policy
        self.steps = steps

    def reset(self, scenario) -> None:
        pass

    def propose(self, cond, ctx):
        return sample_chunk(self.policy, cond, self.steps, ctx.rng)


class ZeroActor:
    def reset(self, scenario) -> None:
        pass

    def propose(self, cond, ctx):
        return np.zeros((CHUNK, 4), dtype=np.float32)


class ExpertActor:
    """Oracle: replays the scripted expert, zero-padded past the current stage's end.

    The replay position is the latest expert frame, up to the current stage's end, whose pose
    matches the live state.  An early "aligned" switch therefore resumes from where the arm
    actually is, and idle steps executed by the loop do not desynchronise the replay.
    """

    def __init__(self, epsilon: float = 0.02):
        self.epsilon = epsilon
        self.actions = np.zeros((0, 4))
        self.poses = np.zeros((0, 4))
        self.segments: list[tuple[int, int]] = []

    def reset(self, scenario) -> None:
        ep = scripted_expert(scenario)
        self.actions = ep.action_array()
        self.poses = np.array([_pose(s) for s in ep.states])
        self.segments = [(s.from_frame, s.to_frame) for s in label_episode(ep, self.epsilon).segments]

    def propose(self, cond, ctx):
        _, hi = self.segments[min(ctx.stage, len(self.segments) - 1)]
        d = np.abs(self.poses[:hi + 1] - np.asarray(_pose(ctx.env.state))).sum(axis=1)
        t = int(np.flatnonzero(d <= d.min() + 1e-9)[-1])
        out = np.zeros((CHUNK, 4), dtype=np.float32)
        seg = self.actions[t:min(hi, t + CHUNK)]
        out[:len(seg)] = seg
        return out


# ---------------------------------------------------------------- plans

def ground_truth_plan(scenario: ScenarioDescriptor, epsilon: float = 0.02) -> list[PlanStep]:
    ep = scripted_expert(scenario)
    plan = label_episode(ep, epsilon)
    return plan_steps(ep, plan)


def plan_steps(episode, plan: MilestonePlan) -> list[PlanStep]:
    out = []
    for i, seg in enumerate(plan.segments):
        h, w = episode.rasters[seg.goal_frames[0]][0], episode.rasters[seg.goal_frames[1]][1]
        out.append(PlanStep(seg.subtask, h, w, i))
    return out


# ---------------------------------------------------------------- execution

@dataclass
class StageOutcome:
    stage: int
    cause: str  # aligned | stopped | timeout | failed
    steps: int
    reason: str = ""


@dataclass
class TaskResult:
    approach: int
    success: int
    stages: list[StageOutcome]
    log: list[dict]
    reason: str = ""

    def log_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


class RolloutFailure(Exception):
    pass


def _pose(state: WorldState) -> list[float]:
    return [*state.gripper_pose, state.gripper_open]


def _record(log_: list, env: Env, stage: int, action=None, chunk: int | None = None, event: str | None = None):
    rec = {"t": env.t, "stage": stage, "pose": _pose(env.state), "action": action}
    if chunk is not None:
        rec["chunk"] = chunk
    if event is not None:
        rec["switch_event"] = event
    log_.append(rec)


def _apply(env: Env, a, log_, stage, chunk) -> None:
    vals = [q9(float(v)) for v in a]
    try:
        act = Action.from_seq(vals)
    except WorldError as e:
        raise RolloutFailure(f"action-bound: {e}") from None
    env.apply(act)
    _record(log_, env, stage, vals, chunk)


def waypoint_targets(proprio: Sequence[float], chunk: np.ndarray, offsets: Sequence[int]) -> list[np.ndarray]:
    """Absolute (x, y, z, g) targets: current proprioception plus cumulative chunk deltas."""
    base = np.asarray(proprio, dtype=np.float32)
    cum = np.cumsum(np.asarray(chunk, dtype=np.float32), axis=0)
    return [base + cum[k - 1] for k in offsets]


def _execute_chunk(env: Env, chunk: np.ndarray, cfg: ExecutorConfig, log_, stage, chunk_id, budget_left) -> int:
    used = 0
    if cfg.mode == "delta":
        for a in chunk[:cfg.execute_steps]:
            if used >= budget_left:
                break
            _apply(env, a, log_, stage, chunk_id)
            used += 1
        return used
    for target in waypoint_targets(_pose(env.state), chunk, cfg.waypoint_offsets):
        n = 5
        for k in range(n):
            if used >= budget_left:
                return used
            cur = np.asarray(_pose(env.state), dtype=np.float32)
            _apply(env, (target - cur) / (n - k), log_, stage, chunk_id)
            used += 1
    return used


def run_stage(env: Env, actor: Actor, plan_step: PlanStep, cfg: ExecutorConfig, instruction_tokens=None,
              stage: int = 0, rng: np.random.Generator | None = None, log_: list | None = None) -> StageOutcome:
    rng = rng if rng is not None else np.random.default_rng(0)
    log_ = log_ if log_ is not None else []
    goal = (plan_step.head, plan_step.wrist)
    ctx = StageContext(env, stage, plan_step, rng)
    used = 0
    chunk_id = 0
    if cfg.use_aligned and aligned(env.observe(), goal, cfg.align_threshold):
        _record(log_, env, stage, event="aligned")
        return StageOutcome(stage, "aligned", 0)
    while used < cfg.stage_budget:
        cond = Conditioning.build(env.observe(), goal, plan_step.subtask, _pose(env.state))
        try:
            chunk = np.asarray(actor.propose(cond, ctx), dtype=np.float32).reshape(CHUNK, 4)
        except PolicyError as e:
            raise RolloutFailure(f"policy: {e}") from None
        used += _execute_chunk(env, chunk, cfg, log_, stage, chunk_id, cfg.stage_budget - used)
        chunk_id += 1
        if cfg.use_aligned and aligned(env.observe(), goal, cfg.align_threshold):
            _record(log_, env, stage, event="aligned")
            return StageOutcome(stage, "aligned", used)
        if cfg.use_stop and float(np.abs(chunk).mean()) < cfg.stop_threshold:
            _record(log_, env, stage, event="stopped")
            return StageOutcome(stage, "stopped", used)
    _record(log_, env, stage, event="timeout")
    return StageOutcome(stage, "timeout", used)


def _decode(planner, env: Env, instruction: str, cfg: ExecutorConfig, history=()):
    head, wrist = env.observe()
    return plan_task(planner, head, wrist, instruction, beam=cfg.beam, history=list(history))


def run_task(scenario: ScenarioDescriptor, actor: Actor, cfg: ExecutorConfig, seed: int = 0,
             plan: Sequence[PlanStep] | None = None, planner=None) -> TaskResult:
    """One closed-loop rollout.  `plan` supplies ground-truth steps; otherwise `planner` decodes them."""
    env = Env(scenario)
    rng = np.random.default_rng(seed)
    log_: list[dict] = []
    outcomes: list[StageOutcome] = []
    actor.reset(scenario)

    def finish(reason=""):
        app, suc = success_metrics(env.states, scenario.target_id)
        if reason:
            suc = 0
        return TaskResult(app, suc, outcomes, log_, reason)

    history: list[PlanStep] = []
    if plan is None:
        if planner is None:
            raise ExecutorError("need a ground-truth plan or a planner")
        try:
            steps = list(_decode(planner, env, scenario.instruction, cfg))
        except Exception as e:  # any decode problem fails the task, not the run
            log.debug("plan decode failed: %s", e)
            return finish("plan-failed")
    else:
        steps = list(plan)
    if not steps:
        return finish("empty-plan")
    i = 0
    while i < len(steps):
        try:
            out = run_stage(env, actor, steps[i], cfg, stage=i, rng=rng, log_=log_)
        except RolloutFailure as e:
            outcomes.append(StageOutcome(i, "failed", 0, str(e)))
            return finish(str(e))
        outcomes.append(out)
        history.append(steps[i])
        i += 1
        if plan is None and cfg.replan and i < len(steps):
            try:
                rest = list(_decode(planner, env, scenario.instruction, cfg, history))
            except Exception:
                return finish("plan-failed")
            steps = history + rest
    return finish()


# ---------------------------------------------------------------- evaluation

def rollout_seed(master: int, scenario_id: str, k: int) -> int:
    h = hashlib.sha256(f"{master}:{scenario_id}:{k}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _category(scenario: ScenarioDescriptor) -> str:
    return OBJECT_CATEGORIES[scenario.target_code]


_POOL: dict = {}


def _pool_init(actors, cfg, planner):
    _POOL.update(actors=actors, cfg=cfg, planner=planner)


def _pool_job(job):
    name, scenario, seed, use_gt = job
    return _one(_POOL["actors"][name], scenario, _POOL["cfg"], seed, _POOL["planner"], use_gt)


def _one(actor, scenario, cfg, seed, planner, use_gt):
    plan = ground_truth_plan(scenario) if use_gt else None
    res = run_task(scenario, actor, cfg, seed, plan=plan, planner=planner)
    return res.approach, res.success


def evaluate(actors: dict[str, Actor], sets: dict[str, Sequence[ScenarioDescriptor]], cfg: ExecutorConfig,
             seed: int = 0, planner=None, jobs: int = 1) -> list[dict]:
    """Mean approach / success per (policy, set), with category and tablecloth breakdowns.

    Rows with category and tablecloth "all" hold the overall means.
    """
    if not actors or not sets:
        raise ExecutorError("need at least one policy and one scenario set")
    use_gt = cfg.plan_source == "ground-truth"
    jobs_list = []
    meta = []
    for name in actors:
        for set_name, scenarios in sets.items():
            for sc in scenarios:
                for k in range(cfg.rollouts):
                    jobs_list.append((name, sc, rollout_seed(seed, sc.scenario_id, k), use_gt))
                    meta.append((name, set_name, _category(sc), str(sc.tablecloth_code)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs, initializer=_pool_init, initargs=(actors, cfg, planner)) as pool:
            results = list(pool.map(_pool_job, jobs_list, chunksize=4))
    else:
        results = [_one(actors[n], sc, cfg, s, planner, g) for n, sc, s, g in jobs_list]

    sums: dict[tuple, list[int]] = defaultdict(lambda: [0, 0, 0])
    for (name, set_name, cat, cloth), (app, suc) in zip(meta, results):
        for key in ((name, set_name, "all", "all"), (name, set_name, cat, "all"), (name, set_name, "all", cloth)):
            acc = sums[key]
            acc[0] += app
            acc[1] += suc
            acc[2] += 1
    rows = []
    for key in sorted(sums, key=lambda k: (list(actors).index(k[0]), list(sets).index(k[1]), k[2] != "all" or k[3] != "all", k[2], k[3])):
        a, s, n = sums[key]
        rows.append(dict(zip(METRIC_COLUMNS, (*key, a / n, s / n, n))))
    return rows


def summary(rows: Iterable[dict], policy: str, set_name: str) -> dict:
    for r in rows:
        if (r["policy"], r["set"], r["category"], r["tablecloth"]) == (policy, set_name, "all", "all"):
            return r
    raise KeyError((policy, set_name))


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["policy"], r["set"], r["category"], r["tablecloth"], f"{r['approach']:.4f}", f"{r['success']:.4f}", r["n"]])
    return buf.getvalue()


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'policy':<14}{'set':<20}{'category':<12}{'cloth':<7}{'App':>7}{'Suc':>7}{'n':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['policy']:<14}{r['set']:<20}{r['category']:<12}{r['tablecloth']:<7}"
                     f"{r['approach']:>7.3f}{r['success']:>7.3f}{r['n']:>6d}")
    return "\n".join(lines)
