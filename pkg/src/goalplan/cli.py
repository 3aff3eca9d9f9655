"""Command-line front end: data generation, labeling, packing, training, planning, rollouts and evaluation.

Every command validates its inputs first.  Failures print one line to stderr,

    error: <validation|runtime>: <message>

and exit with 1 (validation) or 2 (runtime).  Each command writes the fully
resolved run configuration as config.json next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import codec, toyworld
from .checkpoint import CheckpointError, load_model, save_dataset, save_model, write_curve
from .executor import (
    ExecutorConfig, ExpertActor, FlowActor, ZeroActor, evaluate, format_table, ground_truth_plan, metrics_csv,
    plan_steps, rollout_seed, run_task, summary,
)
from .milestone import DEFAULT_EPSILON, RemoteAnnotator, label_episode, label_episodes
from .planner import ContextMLP, CountModel, PlannerTrainConfig, plan_task, train
from .policy import DEFAULT_WINDOW, FlowPolicy, TrainConfig, build_dataset, train_policy

log = logging.getLogger("goalplan")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "run",
    "world": {"kind": "in_domain", "count": 500, "eval_sets": ["in_domain:100:500", "novel:63"]},
    "milestone": {"epsilon": DEFAULT_EPSILON, "annotator": "rule", "endpoint": None, "timeout": 30.0, "retries": 3},
    "codec": {"windows_per_episode": 2},
    "planner": {"model": "count", "order": 0, "alpha": 0.0, "context": 64, "embed_dim": 32, "hidden": 128,
                "steps": 2000, "lr": 0.002, "batch": 64, "optimizer": "adam", "momentum": 0.9, "clip": 5.0,
                "beam": 1},
    "policy": {"hidden": 256, "window": DEFAULT_WINDOW, "use_goal": True, "steps": TrainConfig.steps,
               "lr": TrainConfig.lr, "batch": TrainConfig.batch, "optimizer": TrainConfig.optimizer,
               "momentum": TrainConfig.momentum, "clip": TrainConfig.clip, "lr_final": TrainConfig.lr_final,
               "weighting": TrainConfig.weighting},
    "executor": {f.name: (list(f.default) if isinstance(f.default, tuple) else f.default)
                 for f in fields(ExecutorConfig)},
}


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValidationError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ValidationError(f"config key {where + k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise ValidationError("config root must be a JSON object")
    return _merge(DEFAULTS, user)


def write_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def config_keys(d: dict = DEFAULTS, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        if isinstance(v, dict):
            out += config_keys(v, f"{prefix}{k}.")
        else:
            out.append(f"{prefix}{k} = {json.dumps(v)}")
    return out


def executor_config(cfg: dict) -> ExecutorConfig:
    try:
        return ExecutorConfig(**cfg["executor"])
    except (TypeError, ValueError) as e:
        raise ValidationError(f"executor config: {e}") from None


def planner_train_config(cfg: dict) -> PlannerTrainConfig:
    p = cfg["planner"]
    return PlannerTrainConfig(steps=p["steps"], lr=p["lr"], batch=p["batch"], seed=cfg["seed"],
                              optimizer=p["optimizer"], momentum=p["momentum"], clip=p["clip"])


def policy_train_config(cfg: dict) -> TrainConfig:
    p = cfg["policy"]
    return TrainConfig(steps=p["steps"], lr=p["lr"], batch=p["batch"], seed=cfg["seed"], momentum=p["momentum"],
                       clip=p["clip"], lr_final=p["lr_final"], optimizer=p["optimizer"], weighting=p["weighting"])


# ---------------------------------------------------------------- helpers

def _episode_files(d: str) -> list[Path]:
    p = Path(d)
    if not p.is_dir():
        raise ValidationError(f"episode directory {d} does not exist")
    files = sorted(p.glob("ep_*.json"))
    if not files:
        raise ValidationError(f"no episode files (ep_*.json) in {d}")
    return files


def _load_episodes(d: str, need_labels: bool = False):
    eps = []
    for f in _episode_files(d):
        try:
            ep = toyworld.load_episode(f)
        except (ValueError, KeyError) as e:
            raise ValidationError(f"{f}: {e}") from None
        if need_labels and ep.milestones is None:
            raise ValidationError(f"{f} has no milestones; run `label` first")
        eps.append(ep)
    return eps


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {path} does not exist")
    return p


def parse_set(spec: str, seed: int) -> tuple[str, list]:
    """KIND:COUNT[:OFFSET] -> scenarios OFFSET..OFFSET+COUNT-1 of that kind."""
    parts = spec.split(":")
    if len(parts) not in (2, 3) or parts[0] not in toyworld.SCENARIO_KINDS:
        raise ValidationError(f"bad scenario set {spec!r}; expected KIND:COUNT[:OFFSET] with KIND in "
                              f"{', '.join(toyworld.SCENARIO_KINDS)}")
    try:
        count, offset = int(parts[1]), int(parts[2]) if len(parts) == 3 else 0
    except ValueError:
        raise ValidationError(f"bad scenario set {spec!r}; COUNT and OFFSET must be integers") from None
    if count < 1 or offset < 0:
        raise ValidationError(f"bad scenario set {spec!r}; COUNT must be >= 1 and OFFSET >= 0")
    try:
        scen = toyworld.gen_scenarios(parts[0], offset + count, seed)[offset:]
    except toyworld.WorldError as e:
        raise ValidationError(str(e)) from None
    return parts[0], scen


def _actor(spec: str, steps: int):
    if spec == "expert":
        return ExpertActor()
    if spec == "zero":
        return ZeroActor()
    try:
        return FlowActor(load_model(_existing(spec, "policy checkpoint"), expect="flow_policy"), steps)
    except CheckpointError as e:
        raise ValidationError(str(e)) from None


def write_pgm(path: Path, grid: np.ndarray) -> None:
    """Binary PGM whose gray levels are the palette codes (maxval 63)."""
    g = np.asarray(grid, dtype=np.uint8)
    path.write_bytes(f"P5\n{g.shape[1]} {g.shape[0]}\n63\n".encode("ascii") + g.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    head = data.split(b"\n", 3)
    w, h = (int(v) for v in head[1].split())
    return np.frombuffer(head[3], dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- figures

def _save_png(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})


def _palette_cmap():
    from matplotlib.colors import ListedColormap

    rng = np.random.default_rng(7)
    colors = rng.uniform(0.2, 0.95, size=(64, 3))
    colors[toyworld.EMPTY] = (1.0, 1.0, 1.0)
    colors[toyworld.GRIPPER_OPEN_CODE] = (0.1, 0.1, 0.1)
    colors[toyworld.GRIPPER_CLOSED_CODE] = (0.8, 0.0, 0.0)
    colors[toyworld.PLATE_CODE] = (0.75, 0.75, 0.75)
    return ListedColormap(colors)


def plan_figure(steps, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cmap = _palette_cmap()
    fig, axes = plt.subplots(2, max(1, len(steps)), figsize=(2.4 * max(1, len(steps)), 5), squeeze=False)
    for k, st in enumerate(steps):
        for row, grid in enumerate((st.head, st.wrist)):
            ax = axes[row][k]
            ax.imshow(grid, cmap=cmap, vmin=0, vmax=63, interpolation="nearest", origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0][k].set_title(st.subtask, fontsize=8)
    axes[0][0].set_ylabel("head")
    axes[1][0].set_ylabel("wrist")
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


def eval_figure(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    top = [r for r in rows if r["category"] == "all" and r["tablecloth"] == "all"]
    labels = [f"{r['policy']}\n{r['set']}" for r in top]
    x = np.arange(len(top))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(top)), 3.5))
    ax.bar(x - 0.2, [r["approach"] for r in top], 0.4, label="approach")
    ax.bar(x + 0.2, [r["success"] for r in top], 0.4, label="success")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


def curve_figure(losses: Sequence[float], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(losses)), losses, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> int:
    w = cfg["world"]
    kind = args.kind or w["kind"]
    count = args.count if args.count is not None else w["count"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    if kind not in toyworld.SCENARIO_KINDS:
        raise ValidationError(f"unknown kind {kind!r}")
    w["kind"], w["count"], cfg["seed"] = kind, count, seed
    try:
        scenarios = toyworld.gen_scenarios(kind, count, seed)
    except toyworld.WorldError as e:
        raise ValidationError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenarios):
        toyworld.save_episode(toyworld.scripted_expert(sc), out / f"ep_{i:05d}.json")
    write_config(cfg, out)
    print(f"episodes={len(scenarios)} kind={kind} out={out}")
    return 0


def cmd_label(args, cfg) -> int:
    m = cfg["milestone"]
    if args.annotator:
        m["annotator"] = args.annotator
    if args.endpoint:
        m["endpoint"] = args.endpoint
    if m["annotator"] not in ("rule", "remote"):
        raise ValidationError(f"unknown annotator {m['annotator']!r}")
    if m["annotator"] == "remote" and not m["endpoint"]:
        raise ValidationError("the remote annotator needs --endpoint")
    eps = _load_episodes(args.inp)
    if m["annotator"] == "rule":
        plans = label_episodes(eps, m["epsilon"], jobs=args.jobs)
    else:
        remote = RemoteAnnotator(m["endpoint"], timeout=m["timeout"], retries=m["retries"])
        plans = [label_episode(ep, m["epsilon"], annotator=remote) for ep in eps]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, ep, plan in zip(_episode_files(args.inp), eps, plans):
        ep.milestones = plan
        toyworld.save_episode(ep, out / f.name)
    write_config(cfg, out)
    stages = [len(p) for p in plans]
    print(f"episodes={len(eps)} stages_min={min(stages)} stages_max={max(stages)} out={out}")
    return 0


def packed_sequences(episodes, cfg) -> list:
    """Full-task sequence for every episode, then seeded windows starting mid-task."""
    seqs = []
    n_win = cfg["codec"]["windows_per_episode"]
    for i, ep in enumerate(episodes):
        seqs.append(codec.assemble(ep, ep.milestones))
        rng = np.random.default_rng([cfg["seed"], i])
        for _ in range(n_win):
            seqs.append(codec.sample_sequence(ep, ep.milestones, rng))
    return seqs


def cmd_pack(args, cfg) -> int:
    eps = _load_episodes(args.inp, need_labels=True)
    try:
        seqs = packed_sequences(eps, cfg)
    except codec.CodecError as e:
        raise ValidationError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    codec.write_sequences(out, seqs)
    write_config(cfg, out.parent)
    lens = [len(s.tokens) for s in seqs]
    print(f"sequences={len(seqs)} tokens={sum(lens)} max_len={max(lens)} mean_len={np.mean(lens):.1f} "
          f"budget={codec.MAX_SEQ_LEN}")
    return 0


def cmd_train_wm(args, cfg) -> int:
    p = cfg["planner"]
    if args.model:
        p["model"] = args.model
    try:
        seqs = codec.read_sequences(_existing(args.data, "sequence file"))
    except codec.CodecError as e:
        raise ValidationError(f"{args.data}: {e}") from None
    if p["model"] == "count":
        model = CountModel(p["order"], p["alpha"])
    elif p["model"] == "mlp":
        model = ContextMLP(p["context"], p["embed_dim"], p["hidden"], seed=cfg["seed"])
    else:
        raise ValidationError(f"unknown planner model {p['model']!r}")
    model, curve = train(model, seqs, planner_train_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "planner.vstm")
    write_curve(out / "planner_loss.csv", curve)
    curve_figure(curve, out / "planner_loss.png", f"planner ({p['model']})")
    write_config(cfg, out)
    print(f"model={p['model']} sequences={len(seqs)} final_loss={curve[-1]:.6g} out={out / 'planner.vstm'}")
    return 0


def cmd_train_policy(args, cfg) -> int:
    p = cfg["policy"]
    if args.no_goal:
        p["use_goal"] = False
    eps = _load_episodes(args.data, need_labels=True)
    ds = build_dataset([(ep, ep.milestones) for ep in eps], window=p["window"], seed=cfg["seed"], jobs=args.jobs)
    policy = FlowPolicy(seed=cfg["seed"], hidden=p["hidden"], use_goal=p["use_goal"])
    tcfg = policy_train_config(cfg)
    tcfg.log_every = 1000 if args.verbose else 0
    policy, curve = train_policy(policy, ds, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(policy, out / "policy.vstm")
    save_dataset(ds, out / "dataset.vstd")
    write_curve(out / "policy_loss.csv", curve)
    curve_figure(curve, out / "policy_loss.png", "policy" + ("" if p["use_goal"] else " (no goal)"))
    write_config(cfg, out)
    print(f"samples={len(ds)} steps={tcfg.steps} final_loss={np.mean(curve[-100:]):.6g} out={out / 'policy.vstm'}")
    return 0


def cmd_plan(args, cfg) -> int:
    beam = args.beam if args.beam is not None else cfg["planner"]["beam"]
    if beam < 1:
        raise ValidationError("--beam must be >= 1")
    cfg["planner"]["beam"] = beam
    try:
        model = load_model(_existing(args.model, "planner checkpoint"))
        ep = toyworld.load_episode(_existing(args.episode, "episode file"))
    except (CheckpointError, ValueError, KeyError) as e:
        raise ValidationError(str(e)) from None
    if isinstance(model, FlowPolicy):
        raise ValidationError(f"{args.model} holds a policy, not a planner")
    history = []
    if args.stage:
        if ep.milestones is None:
            raise ValidationError("--stage > 0 needs a labeled episode (consumed stages come from its milestones)")
        if not 0 <= args.stage < len(ep.milestones):
            raise ValidationError(f"--stage must be in [0, {len(ep.milestones)})")
        history = plan_steps(ep, ep.milestones)[:args.stage]
    head, wrist = ep.rasters[0]
    steps = plan_task(model, head, wrist, ep.instruction, beam=beam, history=history)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, st in enumerate(steps, start=args.stage):
        write_pgm(out / f"stage{k}_head.pgm", st.head)
        write_pgm(out / f"stage{k}_wrist.pgm", st.wrist)
        lines.append(f"{k}\t{st.subtask}")
    (out / "subtasks.txt").write_text("".join(line + "\n" for line in lines))
    plan_figure(steps, out / "plan.png")
    write_config(cfg, out)
    print(f"stages={len(steps)} out={out}")
    return 0


def _scenario(spec: str, seed: int):
    kind, _, idx = spec.partition(":")
    if kind not in toyworld.SCENARIO_KINDS or not idx.isdigit():
        raise ValidationError(f"bad scenario {spec!r}; expected KIND:INDEX")
    try:
        return toyworld.gen_scenarios(kind, int(idx) + 1, seed)[int(idx)]
    except toyworld.WorldError as e:
        raise ValidationError(str(e)) from None


def cmd_rollout(args, cfg) -> int:
    ecfg = executor_config(cfg)
    if args.planner and args.ground_truth_plan:
        raise ValidationError("use either --planner or --ground-truth-plan")
    actor = _actor(args.policy, ecfg.sample_steps)
    sc = _scenario(args.scenario, cfg["seed"])
    planner = plan = None
    if args.planner:
        try:
            planner = load_model(_existing(args.planner, "planner checkpoint"))
        except CheckpointError as e:
            raise ValidationError(str(e)) from None
        cfg["executor"]["plan_source"] = "world-model"
    else:
        plan = ground_truth_plan(sc, cfg["milestone"]["epsilon"])
    seed = args.seed if args.seed is not None else rollout_seed(cfg["seed"], sc.scenario_id, 0)
    res = run_task(sc, actor, ecfg, seed=seed, plan=plan, planner=planner)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.log_jsonl())
    write_config(cfg, out.parent)
    print(f"scenario={sc.scenario_id} approach={res.approach} success={res.success} steps={len(res.log)}"
          + (f" reason={res.reason}" if res.reason else ""))
    return 0


def cmd_eval(args, cfg) -> int:
    ecfg = executor_config(cfg)
    actors = {}
    for spec in args.policies:
        name, _, path = spec.rpartition("=")
        name = name or path
        actors[name] = _actor(path, ecfg.sample_steps)
    set_specs = args.sets or cfg["world"]["eval_sets"]
    cfg["world"]["eval_sets"] = list(set_specs)
    sets = {}
    for spec in set_specs:
        name, scen = parse_set(spec, cfg["seed"])
        if name in sets:
            raise ValidationError(f"scenario kind {name!r} listed twice")
        sets[name] = scen
    planner = None
    if args.planner:
        try:
            planner = load_model(_existing(args.planner, "planner checkpoint"))
        except CheckpointError as e:
            raise ValidationError(str(e)) from None
        cfg["executor"]["plan_source"] = ecfg.plan_source = "world-model"
    rows = evaluate(actors, sets, ecfg, seed=cfg["seed"], planner=planner, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(rows))
    eval_figure(rows, out / "metrics.png")
    write_config(cfg, out)
    print(format_table([r for r in rows if r["category"] == "all" and r["tablecloth"] == "all"]))
    for name in actors:
        for s in sets:
            r = summary(rows, name, s)
            print(f"policy={name} set={s} approach={r['approach']:.4f} success={r['success']:.4f} n={r['n']}")
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join("  " + k for k in config_keys())
    p = _Parser(
        prog="goalplan",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Milestone labeling, sequence planning and goal-conditioned flow policies on a toy tabletop.",
        epilog=f"config keys (JSON sections, defaults shown):\n{keys}",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON; unknown keys are rejected")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate expert episodes"))
    sp.add_argument("--kind", choices=toyworld.SCENARIO_KINDS)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("label", help="add milestones to episodes"))
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--annotator", choices=("rule", "remote"))
    sp.add_argument("--endpoint")
    sp.set_defaults(fn=cmd_label)

    sp = common(sub.add_parser("pack", help="assemble token sequences into a VSTQ file"))
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pack)

    sp = common(sub.add_parser("train-wm", help="train the sequence planner"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", choices=("count", "mlp"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_wm)

    sp = common(sub.add_parser("train-policy", help="train the flow policy"))
    sp.add_argument("--data", required=True, help="directory of labeled episodes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-goal", action="store_true", help="language-only baseline (goal features zeroed)")
    sp.set_defaults(fn=cmd_train_policy)

    sp = common(sub.add_parser("plan", help="beam-decode subtasks and goal images"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--episode", required=True)
    sp.add_argument("--stage", type=int, default=0)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_plan)

    sp = common(sub.add_parser("rollout", help="run one task and write its log"))
    sp.add_argument("--policy", required=True, help="policy checkpoint, 'expert' or 'zero'")
    sp.add_argument("--planner")
    sp.add_argument("--ground-truth-plan", action="store_true")
    sp.add_argument("--scenario", required=True, help="KIND:INDEX")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_rollout)

    sp = common(sub.add_parser("eval", help="metrics table over scenario sets"))
    sp.add_argument("--policies", nargs="+", required=True, help="NAME=CHECKPOINT, 'expert' or 'zero'")
    sp.add_argument("--sets", nargs="+", help="KIND:COUNT[:OFFSET]")
    sp.add_argument("--planner")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if getattr(args, "out", None):
            cfg["out"] = args.out
        return args.fn(args, cfg)
    except ValidationError as e:
        print(f"error: validation: {_one_line(e)}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:
        print(f"error: runtime: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


if __name__ == "__main__":
    sys.exit(main())
