"""Automatic milestone labeling of trajectories.

Three steps: a skill library, candidate boundaries from RDP corners of the
gripper path plus gripper open/close events, and segment merging with subtask
text generation behind an annotator.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .toyworld import GRASP_HEIGHT, Episode, is_open

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.02
JITTER_WINDOW = 3
MAX_SEGMENTS = 16
MIN_SEGMENTS = 2


class MilestoneError(ValueError):
    pass


class AnnotationTimeout(MilestoneError):
    """Remote annotation gave up; `completed` maps request id -> finished response."""

    def __init__(self, message: str, completed: dict | None = None, pending: list | None = None):
        super().__init__(message)
        self.completed = completed or {}
        self.pending = pending or []


# ---------------------------------------------------------------- skills

@dataclass(frozen=True)
class Skill:
    skill_id: int
    verb: str
    template: str


@dataclass(frozen=True)
class SkillLibrary:
    skills: tuple[Skill, ...]

    def __post_init__(self):
        if len(self.skills) > 50:
            raise MilestoneError(f"skill library holds {len(self.skills)} skills; the cap is 50")
        if [s.skill_id for s in self.skills] != list(range(len(self.skills))):
            raise MilestoneError("skill ids must be dense from 0")
        verbs = [s.verb for s in self.skills]
        if len(set(verbs)) != len(verbs):
            raise MilestoneError("skill verbs must be unique")

    def by_verb(self, verb: str) -> Skill:
        for s in self.skills:
            if s.verb == verb:
                return s
        raise MilestoneError(f"no skill with verb {verb!r}")

    def __getitem__(self, skill_id: int) -> Skill:
        return self.skills[skill_id]


_DEFAULT_SKILLS = [
    ("approach", "Approach the {obj}"),
    ("pick up", "Pick up the {obj}"),
    ("place onto", "Place the {obj} onto the plate"),
    ("move", "Move the {obj} to the plate"),
    ("adjust", "Adjust the gripper"),
    ("push", "Push the {obj}"),
    ("pull", "Pull the {obj}"),
    ("lift", "Lift the {obj}"),
    ("lower", "Lower the {obj}"),
    ("open", "Open the gripper"),
    ("close", "Close the gripper"),
    ("retreat", "Move away from the {obj}"),
    ("rotate", "Rotate the {obj}"),
    ("stack", "Stack the {obj} on the block"),
    ("wipe", "Wipe the table"),
]


def default_library() -> SkillLibrary:
    return SkillLibrary(tuple(Skill(i, v, t) for i, (v, t) in enumerate(_DEFAULT_SKILLS)))


# ---------------------------------------------------------------- plans

@dataclass(frozen=True)
class Segment:
    subtask: str
    from_frame: int
    to_frame: int
    goal_frames: tuple[int, int]  # per view: head, wrist
    skill_id: int

    def to_dict(self) -> dict:
        return {"subtask": self.subtask, "from": self.from_frame, "to": self.to_frame,
                "goal_frames": list(self.goal_frames), "skill_id": self.skill_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(d["subtask"], int(d["from"]), int(d["to"]), tuple(int(g) for g in d["goal_frames"]), int(d["skill_id"]))


@dataclass(frozen=True)
class MilestonePlan:
    segments: tuple[Segment, ...]
    instruction: str

    def __post_init__(self):
        # structural checks only; labeling additionally demands >= MIN_SEGMENTS (see validate)
        if not self.segments:
            raise MilestoneError("plan has no segments")
        if len(self.segments) > MAX_SEGMENTS:
            raise MilestoneError(f"plan has {len(self.segments)} segments; at most {MAX_SEGMENTS} allowed")
        if self.segments[0].from_frame != 0:
            raise MilestoneError("first segment must start at frame 0")
        for a, b in zip(self.segments, self.segments[1:]):
            if b.from_frame != a.to_frame:
                raise MilestoneError(f"segments not contiguous at frame {a.to_frame} -> {b.from_frame}")
        for s in self.segments:
            if s.from_frame >= s.to_frame:
                raise MilestoneError(f"empty segment [{s.from_frame}, {s.to_frame}]")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def boundaries(self) -> list[int]:
        return [s.to_frame for s in self.segments]

    @property
    def texts(self) -> list[str]:
        return [s.subtask for s in self.segments]

    def validate(self, episode_length: int | None = None, min_segments: int = MIN_SEGMENTS) -> "MilestonePlan":
        if len(self.segments) < min_segments:
            raise MilestoneError(f"plan has {len(self.segments)} segment(s); at least {min_segments} required")
        if episode_length is not None and self.segments[-1].to_frame != episode_length - 1:
            raise MilestoneError(
                f"last segment ends at {self.segments[-1].to_frame}, episode ends at {episode_length - 1}"
            )
        return self

    def stage_of(self, t: int) -> int:
        """Index of the segment containing frame t (a shared boundary frame belongs to the earlier stage)."""
        for i, s in enumerate(self.segments):
            if t <= s.to_frame:
                return i
        raise MilestoneError(f"frame {t} beyond plan end {self.segments[-1].to_frame}")

    def to_dict(self) -> dict:
        return {"instruction": self.instruction, "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "MilestonePlan":
        return cls(tuple(Segment.from_dict(s) for s in d["segments"]), d["instruction"])


# ---------------------------------------------------------------- boundary detection

def _line_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    chord = b - a
    norm = math.sqrt(float(chord @ chord))
    rel = pts - a
    if norm == 0.0:
        return np.sqrt((rel * rel).sum(axis=1))
    cross = np.cross(rel, chord) if pts.shape[1] == 3 else rel[:, 0] * chord[1] - rel[:, 1] * chord[0]
    if cross.ndim == 1:
        return np.abs(cross) / norm
    return np.sqrt((cross * cross).sum(axis=1)) / norm


def rdp_simplify(points: Sequence[Sequence[float]], epsilon: float) -> list[int]:
    """Ramer-Douglas-Peucker on a 2-D or 3-D polyline; returns kept indices."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise MilestoneError("rdp_simplify needs at least 2 points")
    if epsilon < 0:
        raise MilestoneError("epsilon must be >= 0")
    keep = {0, len(pts) - 1}
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _line_distances(pts[lo + 1:hi], pts[lo], pts[hi])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            mid = lo + 1 + k
            keep.add(mid)
            stack.append((lo, mid))
            stack.append((mid, hi))
    return sorted(keep)


def gripper_transitions(openness: Sequence[float]) -> list[int]:
    """Frames where the gripper switches side of the 0.5 threshold."""
    if len(openness) == 0:
        raise MilestoneError("openness signal is empty")
    sides = [is_open(g) for g in openness]
    return [t for t in range(1, len(sides)) if sides[t] != sides[t - 1]]


def _merge_jitter(frames: Sequence[int], last: int, window: int = JITTER_WINDOW) -> list[int]:
    protected = {0, last}
    out: list[int] = []
    for c in sorted(set(frames)):
        if out and c - out[-1] < window:
            if out[-1] in protected and c in protected:
                out.append(c)
            elif out[-1] in protected:
                continue
            else:
                out[-1] = c
        else:
            out.append(c)
    return out


def candidate_boundaries(episode: Episode, epsilon: float = DEFAULT_EPSILON) -> list[int]:
    n = len(episode)
    if n < 2:
        raise MilestoneError("episode needs at least 2 frames")
    kept = rdp_simplify(episode.poses(), epsilon)
    events = gripper_transitions(episode.openness())
    return _merge_jitter([0, n - 1, *kept, *events], n - 1)


# ---------------------------------------------------------------- skill assignment

def _signature(episode: Episode, lo: int, hi: int) -> str:
    opens = episode.openness()
    closes = [t for t in range(lo + 1, hi + 1) if is_open(opens[t - 1]) and not is_open(opens[t])]
    releases = [t for t in range(lo + 1, hi + 1) if not is_open(opens[t - 1]) and is_open(opens[t])]
    if closes:
        return "pick up"
    if releases:
        return "place onto"
    s0, s1 = episode.states[lo], episode.states[hi]
    x0, y0, z0 = s0.gripper_pose
    x1, y1, z1 = s1.gripper_pose
    holding = any(o.held for o in s0.objects)
    if not holding and episode.scenario is not None:
        tgt0 = s0.object(episode.target_id)
        d0 = math.dist((x0, y0, z0), (tgt0.x, tgt0.y, 0.0))
        d1 = math.dist((x1, y1, z1), (tgt0.x, tgt0.y, 0.0))
        if d1 < d0 - 1e-9 and z0 > GRASP_HEIGHT:
            return "approach"
    if holding:
        px, py, _ = s0.plate
        if math.hypot(x1 - px, y1 - py) < math.hypot(x0 - px, y0 - py) - 1e-9:
            return "move"
    return "adjust"


def assign_skills(episode: Episode, boundaries: Sequence[int], library: SkillLibrary | None = None) -> list[tuple[tuple[int, int], int]]:
    library = library or default_library()
    b = list(boundaries)
    if len(b) < 2 or b != sorted(set(b)) or b[0] != 0 or b[-1] != len(episode) - 1:
        raise MilestoneError(f"invalid boundaries {b} for episode of length {len(episode)}")
    return [((lo, hi), library.by_verb(_signature(episode, lo, hi)).skill_id) for lo, hi in zip(b, b[1:])]


def merge_identical(labeled: Sequence[tuple[tuple[int, int], int]]) -> list[tuple[tuple[int, int], int]]:
    out: list[tuple[tuple[int, int], int]] = []
    for (lo, hi), sid in labeled:
        if out and out[-1][1] == sid:
            out[-1] = ((out[-1][0][0], hi), sid)
        else:
            if out and out[-1][0][1] != lo:
                raise MilestoneError(f"segments not contiguous at frame {out[-1][0][1]} -> {lo}")
            out.append(((lo, hi), sid))
    return out


# ---------------------------------------------------------------- annotators

class Annotator(Protocol):
    def annotate(self, episode: Episode, segments: list[tuple[tuple[int, int], int]]) -> list[tuple[tuple[int, int], int, str]]:
        """Return merged (frame span, skill_id, subtask text) triples."""


@dataclass
class RuleAnnotator:
    """Template annotator: folds follow-through and transport segments into their skill.

    `adjust` segments carry no skill of their own and join the preceding segment;
    `move` is the transport half of a placement and joins the following one.
    """

    library: SkillLibrary = field(default_factory=default_library)

    def annotate(self, episode, segments):
        adjust = self.library.by_verb("adjust").skill_id
        move = self.library.by_verb("move").skill_id
        spans = merge_identical(segments)
        folded: list[tuple[tuple[int, int], int]] = []
        for span, sid in spans:
            if sid == adjust and folded:
                folded[-1] = ((folded[-1][0][0], span[1]), folded[-1][1])
            else:
                folded.append((span, sid))
        if len(folded) > 1 and folded[0][1] == adjust:
            folded[:2] = [((0, folded[1][0][1]), folded[1][1])]
        out: list[tuple[tuple[int, int], int]] = []
        carry: int | None = None
        for k, (span, sid) in enumerate(folded):
            if carry is not None:
                span, carry = (carry, span[1]), None
            if sid == move and k < len(folded) - 1:
                carry = span[0]
                continue
            out.append((span, sid))
        spans = merge_identical(out)
        name = episode.scenario.target_name if episode.scenario is not None else "object"
        return [(span, sid, self.library[sid].template.format(obj=name)) for span, sid in spans]


@dataclass
class RemoteAnnotator:
    """Client for an external annotation service speaking JSON over HTTP POST."""

    endpoint: str
    library: SkillLibrary = field(default_factory=default_library)
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_workers: int = 4

    def _request_body(self, episode: Episode, segments) -> dict:
        thumbs = [base64.b64encode(episode.rasters[hi][0].astype(np.uint8).tobytes()).decode("ascii")
                  for (lo, hi), _ in segments]
        return {
            "episode_id": episode.episode_id,
            "segments": [{"from": lo, "to": hi, "skill": self.library[sid].verb} for (lo, hi), sid in segments],
            "thumbnails": thumbs,
        }

    def _post(self, body: dict) -> dict:
        data = json.dumps(body).encode()
        last_err: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(self.endpoint, data=data, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read())
            except (urllib.error.URLError, TimeoutError, OSError) as e:
                last_err = e
                log.warning("annotation request %s failed (attempt %d): %s", body["episode_id"], attempt + 1, e)
        raise AnnotationTimeout(f"annotation service unreachable after {self.retries + 1} attempts: {last_err}")

    def _decode(self, episode: Episode, segments, response: dict):
        out = []
        for seg in response["segments"]:
            lo, hi = int(seg["from"]), int(seg["to"])
            inside = [(min(h, hi) - max(l, lo), sid) for (l, h), sid in segments if min(h, hi) > max(l, lo)]
            if not inside:
                raise MilestoneError(f"annotator returned span [{lo}, {hi}] covering no candidate segment")
            sid = max(inside, key=lambda p: (p[0], -p[1]))[1]
            out.append(((lo, hi), sid, str(seg["subtask"])))
        return out

    def annotate(self, episode, segments):
        return self._decode(episode, segments, self._post(self._request_body(episode, segments)))

    def annotate_many(self, jobs: Sequence[tuple[Episode, list]]) -> list:
        """Concurrent batch; results are returned in job order."""
        bodies = {i: self._request_body(ep, segs) for i, (ep, segs) in enumerate(jobs)}
        completed: dict[int, dict] = {}
        failed: list[int] = []
        with ThreadPoolExecutor(self.max_workers) as pool:
            futures = {i: pool.submit(self._post, body) for i, body in bodies.items()}
            for i, fut in futures.items():
                try:
                    completed[i] = fut.result()
                except AnnotationTimeout:
                    failed.append(i)
        if failed:
            raise AnnotationTimeout(f"{len(failed)} of {len(jobs)} annotation requests failed",
                                    completed=completed, pending=failed)
        return [self._decode(ep, segs, completed[i]) for i, (ep, segs) in enumerate(jobs)]


def _build_plan(episode: Episode, annotated) -> MilestonePlan:
    segs = tuple(Segment(text, lo, hi, (hi, hi), sid) for (lo, hi), sid, text in annotated)
    try:
        plan = MilestonePlan(segs, episode.instruction)
    except MilestoneError as e:
        raise MilestoneError(f"annotator output rejected: {e}") from None
    return plan.validate(len(episode))


def merge_and_describe(episode: Episode, labeled, annotator: Annotator | None = None) -> MilestonePlan:
    annotator = annotator or RuleAnnotator()
    if isinstance(labeled, MilestonePlan):
        labeled = [((s.from_frame, s.to_frame), s.skill_id) for s in labeled.segments]
    merged = merge_identical(labeled)
    return _build_plan(episode, annotator.annotate(episode, merged))


def label_episode(episode: Episode, epsilon: float = DEFAULT_EPSILON, annotator: Annotator | None = None,
                  library: SkillLibrary | None = None) -> MilestonePlan:
    library = library or default_library()
    bounds = candidate_boundaries(episode, epsilon)
    labeled = assign_skills(episode, bounds, library)
    return merge_and_describe(episode, labeled, annotator or RuleAnnotator(library))


def _label_one(args):
    ep, epsilon = args
    return label_episode(ep, epsilon)


def label_episodes(episodes: Sequence[Episode], epsilon: float = DEFAULT_EPSILON, jobs: int = 1) -> list[MilestonePlan]:
    """Label many episodes with the rule annotator; output order follows the input."""
    if jobs <= 1:
        return [label_episode(ep, epsilon) for ep in episodes]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(_label_one, [(ep, epsilon) for ep in episodes]))
