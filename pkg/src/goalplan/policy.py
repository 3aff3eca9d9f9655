"""Goal-conditioned flow-matching action-chunk policy.

The policy regresses the velocity of a straight noise-to-action path and is
sampled with a fixed number of Euler steps.  Chunks are handled internally in
units of the action bound (so targets and noise have comparable scale).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .codec import VOCAB_SIZE, tokenize_text
from .milestone import MilestonePlan
from .nn import Adam, MomentumSGD, TanhMLP
from .toyworld import ACTION_LIMIT, GRID, Episode

log = logging.getLogger(__name__)

CHUNK = 30
ACT_DIM = 4
CHUNK_DIM = CHUNK * ACT_DIM
RASTER_FEATS = 2 * GRID * GRID
EMBED_DIM = 32
PROPRIO_DIM = 4
COND_DIM = 2 * RASTER_FEATS + EMBED_DIM + PROPRIO_DIM  # 1060
TAU_DIM = 3
INPUT_DIM = CHUNK_DIM + COND_DIM + TAU_DIM
MAX_TEXT_TOKENS = 16
DEFAULT_WINDOW = 5
MIN_REMAINING = 1e-3  # floor on (1 - tau) for the clean-chunk head


class PolicyError(ValueError):
    pass


# ---------------------------------------------------------------- conditioning

def raster_features(head: np.ndarray, wrist: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ravel(head), np.ravel(wrist)]).astype(np.float32) / np.float32(63.0)


@dataclass
class Conditioning:
    """Observation, goal, subtask tokens and proprioception for one decision.

    The subtask embedding is produced by the policy from `tokens`, so the
    1,060-wide vector only exists once a policy is at hand (`Policy.cond_vector`).
    """

    obs: np.ndarray  # 512
    goal: np.ndarray  # 512
    tokens: tuple[int, ...]
    proprio: np.ndarray  # 4

    @classmethod
    def build(cls, obs_rasters, goal_rasters, subtask: str, proprio) -> "Conditioning":
        toks = tuple(tokenize_text(subtask)[:MAX_TEXT_TOKENS])
        return cls(raster_features(*obs_rasters), raster_features(*goal_rasters), toks,
                   np.asarray(proprio, dtype=np.float32))


def _token_matrix(token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.zeros((len(token_lists), MAX_TEXT_TOKENS), dtype=np.int64)
    mask = np.zeros((len(token_lists), MAX_TEXT_TOKENS), dtype=np.float32)
    for i, toks in enumerate(token_lists):
        toks = list(toks)[:MAX_TEXT_TOKENS]
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = 1.0
    return ids, mask


# ---------------------------------------------------------------- flow samples

@dataclass
class FlowSample:
    z: np.ndarray
    tau: float
    x_tau: np.ndarray
    v_tau: np.ndarray
    cond: Conditioning | None = None


def make_flow_sample(a: np.ndarray, cond: Conditioning | None, rng: np.random.Generator,
                     tau: float | None = None, z: np.ndarray | None = None) -> FlowSample:
    a = np.asarray(a, dtype=np.float32).reshape(-1)
    if not np.isfinite(a).all():
        raise PolicyError("action chunk holds non-finite entries")
    if z is None:
        z = rng.standard_normal(a.shape[0]).astype(np.float32)
    if tau is None:
        tau = float(rng.uniform(0.0, 1.0))
    t = np.float32(tau)
    x = (np.float32(1.0) - t) * z + t * a
    return FlowSample(z=z, tau=float(tau), x_tau=x, v_tau=a - z, cond=cond)


def tau_features(tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([tau, np.sin(2 * np.pi * tau), np.cos(2 * np.pi * tau)], axis=1).astype(np.float32)


# ---------------------------------------------------------------- the network

class FlowPolicy:
    """MLP velocity field v(x_tau, cond, tau) with a learned subtask-token embedding."""

    kind = "flow_policy"

    def __init__(self, seed: int = 0, hidden: int = 256, use_goal: bool = True, action_scale: float = ACTION_LIMIT,
                 head: str = "clean"):
        if head not in ("clean", "velocity"):
            raise PolicyError(f"unknown output head {head!r}")
        self.head = head
        self.hidden = hidden
        self.use_goal = use_goal
        self.action_scale = float(action_scale)
        self.mlp = TanhMLP("", [INPUT_DIM, hidden, hidden, CHUNK_DIM])
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {
            "embed": (rng.standard_normal((VOCAB_SIZE, EMBED_DIM)) * 0.1).astype(np.float32)
        }
        self.params.update(self.mlp.init(rng))

    def param_names(self) -> list[str]:
        return ["embed", *self.mlp.names()]

    # inputs -------------------------------------------------------
    def _cond_parts(self, conds: Sequence[Conditioning]):
        obs = np.stack([c.obs for c in conds])
        goal = np.stack([c.goal for c in conds])
        if not self.use_goal:
            goal = np.zeros_like(goal)
        prop = np.stack([c.proprio for c in conds]).astype(np.float32)
        ids, mask = _token_matrix([c.tokens for c in conds])
        return obs, goal, prop, ids, mask

    def _embed(self, params, ids, mask):
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        e = (params["embed"][ids] * mask[..., None]).sum(axis=1) / counts
        return e, counts

    def cond_vector(self, cond: Conditioning) -> np.ndarray:
        obs, goal, prop, ids, mask = self._cond_parts([cond])
        e, _ = self._embed(self.params, ids, mask)
        return np.concatenate([obs, goal, e.astype(np.float32), prop], axis=1)[0]

    def _inputs(self, params, x, parts, tau):
        obs, goal, prop, ids, mask = parts
        if not self.use_goal:  # dataset batches arrive with goals filled in
            goal = np.zeros_like(goal)
        e, counts = self._embed(params, ids, mask)
        dt = params["w1"].dtype
        inp = np.concatenate([x.astype(dt), obs.astype(dt), goal.astype(dt), e.astype(dt), prop.astype(dt),
                              tau_features(tau).astype(dt)], axis=1)
        return inp, counts

    # forward / backward ------------------------------------------
    # With head="clean" the MLP output is a clean-chunk estimate a_hat and the velocity is
    # (a_hat - x) / (1 - tau), which is exact on the straight noise-to-data path.
    def _remaining(self, tau, dtype):
        return np.maximum(1.0 - np.asarray(tau, dtype=np.float64), MIN_REMAINING).astype(dtype).reshape(-1, 1)

    def velocity_batch(self, x: np.ndarray, parts, tau: np.ndarray, params=None) -> np.ndarray:
        params = self.params if params is None else params
        inp, _ = self._inputs(params, x, parts, tau)
        out, _ = self.mlp.forward(params, inp)
        if self.head == "clean":
            out = (out - x.astype(out.dtype)) / self._remaining(tau, out.dtype)
        return out

    def velocity(self, x: np.ndarray, cond: Conditioning, tau: float) -> np.ndarray:
        parts = self._cond_parts([cond])
        return self.velocity_batch(np.asarray(x, dtype=np.float32).reshape(1, -1), parts, np.array([tau]))[0]

    def loss_and_grads(self, x, parts, tau, v_target, params=None, weighting: str = "uniform"):
        """Velocity MSE and its gradients.  weighting="clean" scales each sample by (1 - tau)^2."""
        params = self.params if params is None else params
        inp, counts = self._inputs(params, x, parts, tau)
        out, acts = self.mlp.forward(params, inp)
        dt = out.dtype
        rem = self._remaining(tau, dt)
        pred = (out - x.astype(dt)) / rem if self.head == "clean" else out
        diff = pred - v_target.astype(dt)
        w = rem * rem if weighting == "clean" else np.ones_like(rem)
        per = (w * diff * diff).sum(axis=1)
        loss = float(per.mean())
        dout = 2.0 * w * diff / len(x)
        if self.head == "clean":
            dout = dout / rem
        grads: dict[str, np.ndarray] = {}
        dinp = self.mlp.backward(params, acts, dout, grads)
        lo = CHUNK_DIM + 2 * RASTER_FEATS
        de = dinp[:, lo:lo + EMBED_DIM]
        _, _, _, ids, mask = parts
        gE = np.zeros_like(params["embed"])
        wt = (mask / counts)[..., None] * de[:, None, :]
        np.add.at(gE, ids.ravel(), wt.reshape(-1, EMBED_DIM).astype(gE.dtype))
        grads["embed"] = gE
        return loss, grads, per


def flow_loss(policy, samples: Sequence[FlowSample], params=None):
    """Mean squared velocity error over a batch plus parameter gradients.

    `policy` is a FlowPolicy or any callable (x, cond, tau) -> velocity (no gradients then).
    """
    if not samples:
        raise PolicyError("flow_loss needs a non-empty batch")
    x = np.stack([s.x_tau for s in samples])
    v = np.stack([s.v_tau for s in samples])
    tau = np.array([s.tau for s in samples])
    if isinstance(policy, FlowPolicy):
        parts = policy._cond_parts([s.cond for s in samples])
        loss, grads, per = policy.loss_and_grads(x, parts, tau, v, params)
    else:
        pred = np.stack([np.asarray(policy(s.x_tau, s.cond, s.tau)) for s in samples])
        per = ((pred - v) ** 2).sum(axis=1)
        loss, grads = float(per.mean()), {}
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        raise PolicyError(f"non-finite flow loss at sample {int(bad[0])}")
    return loss, grads


# ---------------------------------------------------------------- sampling

def sample_chunk(policy, cond: Conditioning, steps: int = 10, rng: np.random.Generator | None = None,
                 z: np.ndarray | None = None) -> np.ndarray:
    """Integrate the velocity field from noise with `steps` Euler steps; returns a 30x4 chunk."""
    if steps < 1:
        raise PolicyError("steps must be >= 1")
    rng = rng or np.random.default_rng(0)
    x = (rng.standard_normal(CHUNK_DIM) if z is None else np.asarray(z, dtype=np.float64)).astype(np.float32)
    scale = getattr(policy, "action_scale", 1.0)
    vel: Callable = policy.velocity if hasattr(policy, "velocity") else policy
    h = np.float32(1.0 / steps)
    for j in range(steps):
        v = np.asarray(vel(x, cond, j / steps), dtype=np.float32)
        x = x + h * v
        if not np.isfinite(x).all():
            raise PolicyError(f"non-finite chunk at Euler step {j}")
    return (x * np.float32(scale)).reshape(CHUNK, ACT_DIM)


# ---------------------------------------------------------------- training data

def pad_chunk(raw: np.ndarray, t: int, boundary: int) -> np.ndarray:
    """Zero every chunk step at or past the current milestone's end."""
    if t > boundary:
        raise PolicyError(f"frame {t} is past the stage boundary {boundary}; relabel the stage first")
    out = np.array(raw, dtype=np.float32).reshape(CHUNK, ACT_DIM)
    out[max(0, boundary - t):] = 0.0
    return out


def offset_goal(t: int, stage: int, plan: MilestonePlan, window: int, rng: np.random.Generator) -> tuple[int, int]:
    """Goal frame for a training sample at frame t of `stage`, and the (possibly relabeled) stage."""
    if window < 0:
        raise PolicyError("window must be >= 0")
    seg = plan.segments[stage]
    boundary = seg.to_frame
    last = stage == len(plan) - 1
    if not last and abs(t - boundary) <= window:
        if rng.random() < 0.5:
            return plan.segments[stage + 1].goal_frames[0], stage + 1
        return seg.goal_frames[0], stage
    delta = int(rng.integers(-window, window + 1))
    g = min(max(boundary + delta, seg.from_frame), seg.to_frame)
    return g, stage


def raw_chunk(actions: np.ndarray, t: int) -> np.ndarray:
    out = np.zeros((CHUNK, ACT_DIM), dtype=np.float32)
    tail = actions[t:t + CHUNK]
    out[:len(tail)] = tail
    return out


@dataclass
class PolicyDataset:
    obs: np.ndarray  # (N, 512) float32
    goal: np.ndarray  # (N, 512)
    proprio: np.ndarray  # (N, 4)
    tokens: list[tuple[int, ...]]
    target: np.ndarray  # (N, 30, 4)
    stage: np.ndarray  # (N,)
    keys: list[tuple[str, int]]  # (episode id, frame)

    def __len__(self) -> int:
        return len(self.keys)

    def conditioning(self, i: int) -> Conditioning:
        return Conditioning(self.obs[i], self.goal[i], self.tokens[i], self.proprio[i])

    def subset(self, idx) -> "PolicyDataset":
        idx = list(idx)
        return PolicyDataset(self.obs[idx], self.goal[idx], self.proprio[idx], [self.tokens[i] for i in idx],
                             self.target[idx], self.stage[idx], [self.keys[i] for i in idx])

    def parts(self, idx):
        ids, mask = _token_matrix([self.tokens[i] for i in idx])
        return self.obs[idx], self.goal[idx], self.proprio[idx], ids, mask

    @classmethod
    def concat(cls, sets: Sequence["PolicyDataset"]) -> "PolicyDataset":
        return cls(
            np.concatenate([s.obs for s in sets]), np.concatenate([s.goal for s in sets]),
            np.concatenate([s.proprio for s in sets]), [t for s in sets for t in s.tokens],
            np.concatenate([s.target for s in sets]), np.concatenate([s.stage for s in sets]),
            [k for s in sets for k in s.keys],
        )


def _episode_samples(episode: Episode, plan: MilestonePlan, window: int, seed: int) -> PolicyDataset:
    rng = np.random.default_rng([seed, *episode.episode_id.encode()])
    acts = episode.action_array()
    n = len(episode)
    obs, goal, prop, toks, target, stage, keys = [], [], [], [], [], [], []
    for t in range(n):
        i = plan.stage_of(t)
        gframe, eff = offset_goal(t, i, plan, window, rng)
        seg = plan.segments[eff]
        chunk = pad_chunk(raw_chunk(acts, t), t, seg.to_frame)
        obs.append(raster_features(*episode.rasters[t]))
        goal.append(raster_features(*episode.rasters[gframe]))
        prop.append(np.asarray(episode.states[t].proprio(), dtype=np.float32))
        toks.append(tuple(tokenize_text(seg.subtask)[:MAX_TEXT_TOKENS]))
        target.append(chunk)
        stage.append(eff)
        keys.append((episode.episode_id, t))
    return PolicyDataset(np.stack(obs), np.stack(goal), np.stack(prop), toks, np.stack(target),
                         np.asarray(stage, dtype=np.int32), keys)


def build_dataset(pairs: Sequence[tuple[Episode, MilestonePlan]], window: int = DEFAULT_WINDOW, seed: int = 0,
                  jobs: int = 1) -> PolicyDataset:
    """One training sample per frame of every episode, augmented and padded."""
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_episode_samples, *zip(*[(ep, pl, window, seed) for ep, pl in pairs])))
    else:
        parts = [_episode_samples(ep, pl, window, seed) for ep, pl in pairs]
    return PolicyDataset.concat(parts)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 60000
    lr: float = 1e-3
    batch: int = 128
    seed: int = 0
    momentum: float = 0.9
    clip: float = 10.0
    lr_final: float = 0.1  # fraction of lr reached by the cosine schedule
    log_every: int = 0
    optimizer: str = "adam"  # adam | sgd
    weighting: str = "clean"  # uniform | clean: per-sample (1 - tau)^2 weight on the velocity error


class TrainingDiverged(PolicyError):
    pass


def train_policy(policy: FlowPolicy, dataset: PolicyDataset, cfg: TrainConfig) -> tuple[FlowPolicy, list[float]]:
    if len(dataset) == 0:
        raise PolicyError("empty dataset")
    # order-independent batching: index draws refer to the key-sorted view
    order = sorted(range(len(dataset)), key=lambda i: dataset.keys[i])
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "adam":
        opt = Adam(cfg.lr, beta1=cfg.momentum, clip=cfg.clip)
    elif cfg.optimizer == "sgd":
        opt = MomentumSGD(cfg.lr, cfg.momentum, cfg.clip)
    else:
        raise PolicyError(f"unknown optimizer {cfg.optimizer!r}")
    curve: list[float] = []
    first = None
    bad_run = 0
    scale = np.float32(policy.action_scale)
    for step_i in range(cfg.steps):
        frac = step_i / max(1, cfg.steps - 1)
        opt.lr = cfg.lr * (cfg.lr_final + (1 - cfg.lr_final) * 0.5 * (1 + math.cos(math.pi * frac)))
        pick = [order[k] for k in rng.integers(0, len(order), size=cfg.batch)]
        a = dataset.target[pick].reshape(len(pick), -1) / scale
        z = rng.standard_normal(a.shape).astype(np.float32)
        tau = rng.uniform(0.0, 1.0, size=len(pick)).astype(np.float32)
        x = (1 - tau[:, None]) * z + tau[:, None] * a
        v = a - z
        loss, grads, per = policy.loss_and_grads(x, dataset.parts(pick), tau, v, weighting=cfg.weighting)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step_i}")
        first = loss if first is None else first
        bad_run = bad_run + 1 if loss > 10 * first else 0
        if bad_run >= 100:
            raise TrainingDiverged(f"loss above 10x initial for 100 steps (step {step_i})")
        opt.step(policy.params, grads)
        curve.append(loss)
        if cfg.log_every and step_i % cfg.log_every == 0:
            log.info("policy step %d loss %.4f", step_i, loss)
    return policy, curve
