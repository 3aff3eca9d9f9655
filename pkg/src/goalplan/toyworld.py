"""Deterministic 2-D tabletop pick-and-place world.

The table is the unit square.  A gripper moves in (x, y, z) with an openness
fraction; objects are one-cell squares snapped to the 16x16 cell grid and a
round plate sits somewhere on the table.  Every float the simulator produces is
rounded to 9 significant digits so that episodes survive a JSON round trip and
replay bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

GRID = 16
CELL = 1.0 / GRID
CONTROL_HZ = 10
ACTION_LIMIT = 0.1
OPEN_THRESHOLD = 0.5
GRASP_RADIUS = 0.05
GRASP_HEIGHT = 0.1
PLATE_RADIUS = 0.1

APPROACH_RADIUS = 0.08
APPROACH_HEIGHT = 0.3

# palette
EMPTY = 0
TABLECLOTH_CODES = tuple(range(1, 9))
OBJECT_CODES = tuple(range(16, 32))
TRAIN_CODES = tuple(range(16, 21))
HELDOUT_CODES = tuple(range(21, 32))
GRIPPER_OPEN_CODE = 32
GRIPPER_CLOSED_CODE = 33
PLATE_CODE = 34
PALETTE = frozenset((EMPTY, *TABLECLOTH_CODES, *OBJECT_CODES, GRIPPER_OPEN_CODE, GRIPPER_CLOSED_CODE, PLATE_CODE))

OBJECT_NAMES = {
    16: "apple", 17: "banana", 18: "cup", 19: "block", 20: "bottle",
    21: "lemon", 22: "mug", 23: "sponge", 24: "carrot", 25: "can", 26: "ball",
    27: "box", 28: "pear", 29: "spoon", 30: "brush", 31: "tomato",
}
OBJECT_CATEGORIES = {
    16: "fruit", 17: "fruit", 18: "container", 19: "toy", 20: "container",
    21: "fruit", 22: "container", 23: "tool", 24: "vegetable", 25: "container", 26: "toy",
    27: "container", 28: "fruit", 29: "tool", 30: "tool", 31: "vegetable",
}

# expert motion constants
EXPERT_SPEED = 0.05
GRIP_STEP = 0.08
GRIP_OPEN = 0.64
GRIP_CLOSED = 0.32
HOVER_Z = 0.3
GRASP_Z = 0.05
START_Z = 0.5
PHASES = ("approach", "descend", "close", "lift", "move", "lower", "open", "retreat")


class WorldError(ValueError):
    """Invalid world input (bad action, unknown object, rejected scenario)."""


def q9(x: float) -> float:
    """Round to 9 significant digits (the episode file precision)."""
    return float(f"{x:.9g}")


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    dz: float
    dg: float

    def __post_init__(self):
        for name, v in zip("xyzg", self.as_tuple()):
            if not math.isfinite(v) or abs(v) > ACTION_LIMIT:
                raise WorldError(f"action component d{name}={v!r} outside [-{ACTION_LIMIT}, {ACTION_LIMIT}]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dz, self.dg)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Action":
        if len(seq) != 4:
            raise WorldError(f"action needs 4 components, got {len(seq)}")
        return cls(*(float(v) for v in seq))


ZERO_ACTION = Action(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ObjectState:
    id: int
    code: int
    x: float
    y: float
    held: bool = False


@dataclass(frozen=True)
class WorldState:
    gripper_pose: tuple[float, float, float]
    gripper_open: float
    objects: tuple[ObjectState, ...]
    plate: tuple[float, float, float]  # (x, y, radius)
    tablecloth_code: int
    step_index: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if sum(o.held for o in self.objects) > 1:
            raise WorldError("more than one object held")
        codes = [o.code for o in self.objects]
        if len(set(codes)) != len(codes):
            raise WorldError("palette codes must be unique per object")
        if self.tablecloth_code not in TABLECLOTH_CODES:
            raise WorldError(f"tablecloth code {self.tablecloth_code} not in 1..8")

    def object(self, object_id: int) -> ObjectState:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise WorldError(f"unknown object id {object_id}")

    def proprio(self) -> tuple[float, float, float, float]:
        return (*self.gripper_pose, self.gripper_open)

    def to_vector(self) -> list[float]:
        """Flat numeric form used in episode files.

        Layout: x, y, z, openness, step_index, then (id, code, x, y, held) per object.
        Plate, tablecloth and seed are constant per episode and live in the scenario.
        """
        out = [*self.gripper_pose, self.gripper_open, float(self.step_index)]
        for o in self.objects:
            out += [float(o.id), float(o.code), o.x, o.y, 1.0 if o.held else 0.0]
        return out

    @classmethod
    def from_vector(cls, vec: Sequence[float], plate, tablecloth_code: int, rng_seed: int = 0) -> "WorldState":
        if (len(vec) - 5) % 5:
            raise WorldError(f"malformed state vector of length {len(vec)}")
        objs = []
        for k in range(5, len(vec), 5):
            i, c, x, y, h = vec[k:k + 5]
            objs.append(ObjectState(int(i), int(c), float(x), float(y), bool(h)))
        return cls(
            gripper_pose=(float(vec[0]), float(vec[1]), float(vec[2])),
            gripper_open=float(vec[3]),
            objects=tuple(objs),
            plate=tuple(float(v) for v in plate),
            tablecloth_code=int(tablecloth_code),
            step_index=int(vec[4]),
            rng_seed=int(rng_seed),
        )


def is_open(openness: float) -> bool:
    return openness >= OPEN_THRESHOLD


def planar_distance(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(ax - bx, ay - by)


def step(state: WorldState, action: Action) -> WorldState:
    """Advance one control tick (0.1 s)."""
    x, y, z = state.gripper_pose
    dx, dy, dz, dg = action.as_tuple()
    x, y, z = q9(_clamp01(x + dx)), q9(_clamp01(y + dy)), q9(_clamp01(z + dz))
    g_prev = state.gripper_open
    g = q9(_clamp01(g_prev + dg))

    objects = list(state.objects)
    held = next((k for k, o in enumerate(objects) if o.held), None)
    if held is not None:
        if not is_open(g_prev) and is_open(g):
            objects[held] = replace(objects[held], x=x, y=y, held=False)
            held = None
    elif is_open(g_prev) and not is_open(g) and z <= GRASP_HEIGHT:
        best = None
        for k, o in enumerate(objects):
            d = planar_distance(x, y, o.x, o.y)
            if d <= GRASP_RADIUS and (best is None or (d, o.id) < best[0]):
                best = ((d, o.id), k)
        if best is not None:
            held = best[1]
    if held is not None:
        objects[held] = replace(objects[held], x=x, y=y, held=True)

    return replace(
        state,
        gripper_pose=(x, y, z),
        gripper_open=g,
        objects=tuple(objects),
        step_index=state.step_index + 1,
    )


# ---------------------------------------------------------------- rendering

_HEAD_CENTERS = (np.arange(GRID) + 0.5) / GRID
_WRIST_OFFSETS = np.arange(GRID) - (GRID - 1) / 2.0


# wrist marker: a 6x6 ring of "jaws" around the centre; the inner 4x4 shows the scene
_JAWS = np.zeros((GRID, GRID), dtype=bool)
_JAWS[5:11, 5:11] = True
_JAWS[6:10, 6:10] = False


def wrist_fov(z: float) -> float:
    """Width of the table patch seen by the wrist camera at height z."""
    return 0.25 + 0.75 * z


def _paint_scene(px: np.ndarray, py: np.ndarray, state: WorldState) -> np.ndarray:
    inside = (px >= 0.0) & (px < 1.0) & (py >= 0.0) & (py < 1.0)
    grid = np.where(inside, state.tablecloth_code, EMPTY).astype(np.int16)
    cx, cy, r = state.plate
    grid[inside & ((px - cx) ** 2 + (py - cy) ** 2 <= r * r)] = PLATE_CODE
    half = CELL / 2.0
    for o in sorted(state.objects, key=lambda o: (o.held, o.id)):
        m = inside & (px >= o.x - half) & (px < o.x + half) & (py >= o.y - half) & (py < o.y + half)
        grid[m] = o.code
    return grid


def head_cell(x: float, y: float) -> tuple[int, int]:
    """(row, col) of the head-view cell containing a table point."""
    return min(int(y * GRID), GRID - 1), min(int(x * GRID), GRID - 1)


def render(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Return (head, wrist) 16x16 palette rasters; row index grows with y."""
    marker = GRIPPER_OPEN_CODE if is_open(state.gripper_open) else GRIPPER_CLOSED_CODE
    gx, gy, gz = state.gripper_pose

    px, py = np.meshgrid(_HEAD_CENTERS, _HEAD_CENTERS)
    head = _paint_scene(px, py, state)
    head[head_cell(gx, gy)] = marker

    w = wrist_fov(gz) / GRID
    px, py = np.meshgrid(gx + _WRIST_OFFSETS * w, gy + _WRIST_OFFSETS * w)
    wrist = _paint_scene(px, py, state)
    wrist[_JAWS] = marker
    return head, wrist


def validate_raster(grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.shape != (GRID, GRID):
        raise WorldError(f"raster must be {GRID}x{GRID}, got {grid.shape}")
    bad = ~np.isin(grid, list(PALETTE))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise WorldError(f"cell ({r},{c}) holds code {grid[r, c]} outside the palette")


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class ScenarioDescriptor:
    kind: str
    index: int
    layout_id: str
    objects: tuple[tuple[int, float, float], ...]  # (code, x, y); object id = position in tuple
    target_id: int
    plate: tuple[float, float]
    tablecloth_code: int
    start: tuple[float, float]
    seed: int

    @property
    def target_code(self) -> int:
        return self.objects[self.target_id][0]

    @property
    def target_name(self) -> str:
        return OBJECT_NAMES[self.target_code]

    @property
    def instruction(self) -> str:
        return f"Pick up the {self.target_name} and place it onto the plate"

    @property
    def scenario_id(self) -> str:
        return f"{self.kind}-{self.index:04d}"

    def initial_state(self) -> WorldState:
        return WorldState(
            gripper_pose=(q9(self.start[0]), q9(self.start[1]), START_Z),
            gripper_open=GRIP_OPEN,
            objects=tuple(ObjectState(i, c, q9(x), q9(y)) for i, (c, x, y) in enumerate(self.objects)),
            plate=(q9(self.plate[0]), q9(self.plate[1]), PLATE_RADIUS),
            tablecloth_code=self.tablecloth_code,
            step_index=0,
            rng_seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "index": self.index, "layout_id": self.layout_id,
            "objects": [list(o) for o in self.objects], "target_id": self.target_id,
            "plate": list(self.plate), "tablecloth_code": self.tablecloth_code,
            "start": list(self.start), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioDescriptor":
        return cls(
            kind=d["kind"], index=int(d["index"]), layout_id=str(d["layout_id"]),
            objects=tuple((int(c), float(x), float(y)) for c, x, y in d["objects"]),
            target_id=int(d["target_id"]), plate=(float(d["plate"][0]), float(d["plate"][1])),
            tablecloth_code=int(d["tablecloth_code"]), start=(float(d["start"][0]), float(d["start"][1])),
            seed=int(d["seed"]),
        )


SCENARIO_KINDS = ("in_domain", "unseen_distractor", "unseen_target", "novel")
N_OBJECTS = 4
N_BANK_LAYOUTS = 12
START_POSES = ((0.5, 0.06), (0.22, 0.1), (0.78, 0.1), (0.5, 0.94))
_BANK_SEED = 20240611
_NOVEL_LAYOUT_POOL = 4096


def _cell_center(i: int) -> float:
    return (i + 0.5) / GRID


def _random_layout(rng: np.random.Generator) -> tuple[tuple[float, float], list[tuple[float, float]]]:
    """Plate center plus N_OBJECTS object slots on cell centers, all well separated."""
    while True:
        plate = (_cell_center(int(rng.integers(3, 13))), _cell_center(int(rng.integers(4, 13))))
        slots: list[tuple[float, float]] = []
        tries = 0
        while len(slots) < N_OBJECTS and tries < 500:
            tries += 1
            p = (_cell_center(int(rng.integers(2, 14))), _cell_center(int(rng.integers(3, 14))))
            if planar_distance(*p, *plate) < PLATE_RADIUS + 2.5 * CELL:
                continue
            if any(planar_distance(*p, *q) < 2.9 * CELL for q in slots):
                continue
            slots.append(p)
        if len(slots) == N_OBJECTS:
            return plate, slots


def layout_bank() -> list[dict]:
    """The fixed in-domain layouts (independent of any caller seed)."""
    rng = np.random.default_rng(_BANK_SEED)
    bank = []
    for k in range(N_BANK_LAYOUTS):
        plate, slots = _random_layout(rng)
        bank.append({"id": f"bank{k:02d}", "plate": plate, "slots": slots, "tablecloth": TABLECLOTH_CODES[k % 8]})
    return bank


def _perm_count(n: int, k: int) -> int:
    return math.perm(n, k)


def scenario_capacity(kind: str) -> int:
    starts = len(START_POSES)
    if kind == "in_domain":
        return N_BANK_LAYOUTS * len(TRAIN_CODES) * _perm_count(len(TRAIN_CODES) - 1, N_OBJECTS - 1) * starts
    if kind == "unseen_distractor":
        # every in-domain combination crossed with a non-empty set of swapped distractor slots
        return scenario_capacity("in_domain") * (2 ** (N_OBJECTS - 1) - 1)
    if kind == "unseen_target":
        return N_BANK_LAYOUTS * len(HELDOUT_CODES) * _perm_count(len(TRAIN_CODES), N_OBJECTS - 1) * starts
    if kind == "novel":
        return len(HELDOUT_CODES) * len(TABLECLOTH_CODES) * _NOVEL_LAYOUT_POOL
    raise WorldError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")


def gen_scenarios(kind: str, count: int, seed: int) -> list[ScenarioDescriptor]:
    """Draw `count` distinct scenarios of one evaluation axis."""
    cap = scenario_capacity(kind)
    if count < 1:
        raise WorldError("count must be >= 1")
    if count > cap:
        raise WorldError(f"count {count} exceeds the distinct-scenario capacity of kind {kind!r} (cap {cap})")
    rng = np.random.default_rng([seed, SCENARIO_KINDS.index(kind)])
    bank = layout_bank()
    seen: set = set()
    out: list[ScenarioDescriptor] = []
    while len(out) < count:
        if kind == "novel":
            plate, slots = _random_layout(rng)
            layout_id = "rand-" + ",".join(f"{int(x * GRID)}:{int(y * GRID)}" for x, y in [plate, *slots])
            tablecloth = int(rng.choice(TABLECLOTH_CODES))
            start = START_POSES[int(rng.integers(len(START_POSES)))]
        else:
            lay = bank[int(rng.integers(len(bank)))]
            plate, slots, tablecloth, layout_id = lay["plate"], lay["slots"], lay["tablecloth"], lay["id"]
            start = START_POSES[int(rng.integers(len(START_POSES)))]

        if kind in ("unseen_target", "novel"):
            target = int(rng.choice(HELDOUT_CODES))
            distractors = [int(c) for c in rng.permutation(TRAIN_CODES)[: N_OBJECTS - 1]]
        else:
            target = int(rng.choice(TRAIN_CODES))
            pool = [c for c in TRAIN_CODES if c != target]
            distractors = [int(c) for c in rng.permutation(pool)[: N_OBJECTS - 1]]
            if kind == "unseen_distractor":
                n_swap = int(rng.integers(1, N_OBJECTS))
                where = sorted(int(k) for k in rng.permutation(N_OBJECTS - 1)[:n_swap])
                fresh = [int(c) for c in rng.permutation(HELDOUT_CODES)[:n_swap]]
                for k, c in zip(where, fresh):
                    distractors[k] = c

        target_slot = int(rng.integers(N_OBJECTS))
        codes = distractors[:target_slot] + [target] + distractors[target_slot:]
        objects = tuple((c, x, y) for c, (x, y) in zip(codes, slots))
        key = (target, tablecloth, layout_id) if kind == "novel" else (layout_id, objects, start)
        if key in seen:
            continue
        seen.add(key)
        desc = ScenarioDescriptor(
            kind=kind, index=len(out), layout_id=layout_id, objects=objects, target_id=target_slot,
            plate=plate, tablecloth_code=tablecloth, start=start,
            seed=int(rng.integers(2**63 - 1)),
        )
        _check_scenario(desc)
        out.append(desc)
    return out


def _check_scenario(desc: ScenarioDescriptor) -> None:
    tx, ty = desc.objects[desc.target_id][1:]
    if planar_distance(tx, ty, *desc.plate) <= PLATE_RADIUS + CELL / 2:
        raise WorldError(f"scenario {desc.scenario_id}: target occluded by plate")


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    instruction: str
    states: list[WorldState]
    actions: list[Action]
    rasters: list[tuple[np.ndarray, np.ndarray]]
    scenario: ScenarioDescriptor | None = None
    seed: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)
    milestones: Any = None  # milestone.MilestonePlan once labeled

    def __post_init__(self):
        if len(self.actions) != len(self.states) - 1 or len(self.rasters) != len(self.states):
            raise WorldError(
                f"inconsistent episode lengths: {len(self.states)} states, "
                f"{len(self.actions)} actions, {len(self.rasters)} raster pairs"
            )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def episode_id(self) -> str:
        return self.scenario.scenario_id if self.scenario is not None else f"episode-{self.seed}"

    @property
    def target_id(self) -> int:
        if self.scenario is None:
            raise WorldError("episode has no scenario; target unknown")
        return self.scenario.target_id

    def poses(self) -> np.ndarray:
        return np.array([s.gripper_pose for s in self.states], dtype=np.float64)

    def openness(self) -> np.ndarray:
        return np.array([s.gripper_open for s in self.states], dtype=np.float64)

    def action_array(self) -> np.ndarray:
        return np.array([a.as_tuple() for a in self.actions], dtype=np.float64).reshape(-1, 4)

    def to_dict(self) -> dict:
        d = {
            "instruction": self.instruction,
            "seed": self.seed,
            "scenario": self.scenario.to_dict() if self.scenario else None,
            "states": [s.to_vector() for s in self.states],
            "actions": [list(a.as_tuple()) for a in self.actions],
            "rasters": [[h.ravel().tolist(), w.ravel().tolist()] for h, w in self.rasters],
            "metadata": self.metadata,
        }
        if self.milestones is not None:
            d["milestones"] = self.milestones.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        scen = ScenarioDescriptor.from_dict(d["scenario"]) if d.get("scenario") else None
        if scen is None:
            raise WorldError("episode file lacks a scenario block")
        plate = (q9(scen.plate[0]), q9(scen.plate[1]), PLATE_RADIUS)
        states = [WorldState.from_vector(v, plate, scen.tablecloth_code, scen.seed) for v in d["states"]]
        rasters = []
        for pair in d["rasters"]:
            if len(pair) != 2 or any(len(v) != GRID * GRID for v in pair):
                raise WorldError("each raster entry must hold two views of 256 cells")
            rasters.append(tuple(np.asarray(v, dtype=np.int16).reshape(GRID, GRID) for v in pair))
        ep = cls(
            instruction=d["instruction"], states=states,
            actions=[Action.from_seq(a) for a in d["actions"]], rasters=rasters,
            scenario=scen, seed=int(d.get("seed", 0)), metadata=d.get("metadata", {}),
        )
        if d.get("milestones") is not None:
            from .milestone import MilestonePlan

            ep.milestones = MilestonePlan.from_dict(d["milestones"])
        return ep


def _fmt_float(x: float) -> str:
    return f"{x:.9g}"


class _EpisodeEncoder(json.JSONEncoder):
    def iterencode(self, o, _one_shot=False):
        return super().iterencode(_round_floats(o), _one_shot)


def _round_floats(o):
    if isinstance(o, float):
        return q9(o)
    if isinstance(o, dict):
        return {k: _round_floats(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_round_floats(v) for v in o]
    return o


def save_episode(ep: Episode, path) -> None:
    with open(path, "w") as f:
        json.dump(_round_floats(ep.to_dict()), f, separators=(",", ":"))


def load_episode(path) -> Episode:
    with open(path) as f:
        return Episode.from_dict(json.load(f))


def rollout_states(state: WorldState, actions: Iterable[Action]) -> list[WorldState]:
    states = [state]
    for a in actions:
        states.append(step(states[-1], a))
    return states


def make_episode(scenario: ScenarioDescriptor, actions: Sequence[Action], metadata=None) -> Episode:
    states = rollout_states(scenario.initial_state(), actions)
    return Episode(
        instruction=scenario.instruction, states=states, actions=list(actions),
        rasters=[render(s) for s in states], scenario=scenario, seed=scenario.seed,
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------- scripted expert

def _linear_moves(frm: Sequence[float], to: Sequence[float], speed: float = EXPERT_SPEED) -> list[Action]:
    delta = [b - a for a, b in zip(frm, to)]
    n = max(1, math.ceil(max(abs(d) for d in delta) / speed - 1e-9))
    per = [q9(d / n) for d in delta]
    moves = [Action(per[0], per[1], per[2], 0.0) for _ in range(n)]
    # absorb the rounding remainder in the last step
    rem = [q9(d - p * (n - 1)) for d, p in zip(delta, per)]
    moves[-1] = Action(rem[0], rem[1], rem[2], 0.0)
    return moves


def _gripper_moves(frm: float, to: float) -> list[Action]:
    n = max(1, math.ceil(abs(to - frm) / GRIP_STEP - 1e-9))
    d = q9((to - frm) / n)
    return [Action(0.0, 0.0, 0.0, d) for _ in range(n)]


@dataclass(frozen=True)
class ExpertStyle:
    """Per-episode motion parameters of the scripted expert."""

    speed: float = EXPERT_SPEED
    hover_z: float = HOVER_Z
    grasp_z: float = GRASP_Z
    approach_offset: tuple[float, float] = (0.0, 0.0)
    move_offset: tuple[float, float] = (0.0, 0.0)
    place_offset: tuple[float, float] = (0.0, 0.0)


NOMINAL_STYLE = ExpertStyle()


def expert_style(scenario: ScenarioDescriptor) -> ExpertStyle:
    """Seeded variation around the nominal script.

    Demonstrations that hover slightly off target and correct on the way down give a
    learned policy examples of recovering from small pose errors.
    """
    rng = np.random.default_rng([scenario.seed, 0x5E])

    def off(r):
        return (q9(rng.uniform(-r, r)), q9(rng.uniform(-r, r)))

    return ExpertStyle(
        speed=q9(rng.uniform(0.04, 0.06)),
        hover_z=q9(rng.uniform(0.24, HOVER_Z)),
        grasp_z=q9(rng.uniform(0.03, 0.07)),
        approach_offset=off(0.02),
        move_offset=off(0.02),
        place_offset=off(0.03),
    )


def expert_actions(scenario: ScenarioDescriptor, style: ExpertStyle | None = None) -> tuple[list[Action], list[int]]:
    """Eight piecewise-linear phases; returns actions and the end frame of each phase."""
    st = expert_style(scenario) if style is None else style
    s0 = scenario.initial_state()
    tx, ty = s0.object(scenario.target_id).x, s0.object(scenario.target_id).y
    px, py = s0.plate[0], s0.plate[1]
    x, y, z = s0.gripper_pose
    (ax, ay), (mx, my), (lx, ly) = st.approach_offset, st.move_offset, st.place_offset
    hz, gz = st.hover_z, st.grasp_z
    waypoints = [
        ("approach", (q9(tx + ax), q9(ty + ay), hz)),
        ("descend", (tx, ty, gz)),
        ("close", GRIP_CLOSED),
        ("lift", (tx, ty, hz)),
        ("move", (q9(px + mx), q9(py + my), hz)),
        ("lower", (q9(px + lx), q9(py + ly), gz)),
        ("open", GRIP_OPEN),
        ("retreat", (q9(px + lx), q9(py + ly), hz)),
    ]
    actions: list[Action] = []
    ends: list[int] = []
    pose, grip = (x, y, z), s0.gripper_open
    for _, goal in waypoints:
        if isinstance(goal, tuple):
            actions += _linear_moves(pose, goal, st.speed)
            pose = goal
        else:
            actions += _gripper_moves(grip, goal)
            grip = goal
        ends.append(len(actions))
    return actions, ends


def scripted_expert(scenario: ScenarioDescriptor, style: ExpertStyle | None = None) -> Episode:
    """Expert demonstration; `style` defaults to the scenario's seeded variation."""
    _check_scenario(scenario)
    st = expert_style(scenario) if style is None else style
    actions, ends = expert_actions(scenario, st)
    ep = make_episode(scenario, actions)
    opens = ep.openness()
    crossings = [t for t in range(1, len(opens)) if is_open(opens[t]) != is_open(opens[t - 1])]
    ep.metadata = {
        "scenario_id": scenario.scenario_id,
        "phases": list(PHASES),
        "phase_ends": ends,
        "gripper_events": crossings,
        "source": "scripted_expert",
        "style": asdict(st),
    }
    return ep


# ---------------------------------------------------------------- metrics

def success_metrics(episode_or_states, target_id: int) -> tuple[int, int]:
    """(approach, success) flags for one trajectory."""
    states = episode_or_states.states if isinstance(episode_or_states, Episode) else list(episode_or_states)
    ids = {o.id for o in states[0].objects}
    if target_id not in ids:
        raise WorldError(f"unknown target id {target_id}; episode objects are {sorted(ids)}")
    approach = 0
    for s in states:
        o = s.object(target_id)
        x, y, z = s.gripper_pose
        if z <= APPROACH_HEIGHT and planar_distance(x, y, o.x, o.y) <= APPROACH_RADIUS:
            approach = 1
            break
    final = states[-1]
    o = final.object(target_id)
    px, py, r = final.plate
    placed = planar_distance(o.x, o.y, px, py) <= r and not o.held
    success = int(placed and is_open(final.gripper_open))
    return approach, success if approach else 0
