"""Binary model checkpoints ("VSTM"), loss-curve CSVs and the policy dataset cache.

Checkpoint layout, little-endian throughout:

    b"VSTM"  u16 version  u8 kind  u16 tensor count
    per tensor:  u16 name length, name (utf-8), u8 rank, u32 dims[rank], float32 data

Tensors are written in each model's fixed declaration order.  Integer-valued
metadata (model hyper-parameters, count-model corpora) is stored as float32,
which is exact for every value the models use (< 2**24).  Real-valued settings
are restored as the shortest decimal that round-trips through float32.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .planner import ContextMLP, CountModel, NextTokenModel
from .policy import ACT_DIM, CHUNK, MAX_TEXT_TOKENS, PROPRIO_DIM, RASTER_FEATS, FlowPolicy, PolicyDataset

MAGIC = b"VSTM"
VERSION = 1
KINDS = {"count": 1, "context_mlp": 2, "flow_policy": 3}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_HEADS = ("clean", "velocity")


class CheckpointError(ValueError):
    pass


def _meta_float(v) -> float:
    # shortest decimal that round-trips through float32, so 0.1 comes back as 0.1
    return float(str(np.float32(v)))


# ---------------------------------------------------------------- raw tensors

def write_tensors(path, kind: str, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HBH", VERSION, KINDS[kind], len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a VSTM checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    version, kind, count = struct.unpack("<HBH", take(5))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if kind not in _KIND_NAMES:
        raise CheckpointError(f"{path}: unknown model kind tag {kind}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return _KIND_NAMES[kind], tensors


# ---------------------------------------------------------------- models

def save_model(model, path) -> None:
    if isinstance(model, CountModel):
        lengths = np.array([len(s) for s in model.corpus], dtype=np.float32)
        flat = np.array([t for s in model.corpus for t in s], dtype=np.float32)
        cfg = np.array([model.order, model.alpha, model.vocab_size], dtype=np.float32)
        write_tensors(path, "count", [("config", cfg), ("lengths", lengths), ("tokens", flat)])
    elif isinstance(model, ContextMLP):
        cfg = np.array([model.context, model.embed_dim, model.hidden, model.vocab_size], dtype=np.float32)
        write_tensors(path, "context_mlp", [("config", cfg)] + [(k, model.params[k]) for k in model.param_names()])
    elif isinstance(model, FlowPolicy):
        cfg = np.array([model.hidden, float(model.use_goal), model.action_scale, _HEADS.index(model.head)],
                       dtype=np.float32)
        write_tensors(path, "flow_policy", [("config", cfg)] + [(k, model.params[k]) for k in model.param_names()])
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def _load_params(model, tensors: dict, path) -> None:
    for k in model.param_names():
        if k not in tensors:
            raise CheckpointError(f"{path}: missing tensor {k!r}")
        if tensors[k].shape != model.params[k].shape:
            raise CheckpointError(f"{path}: tensor {k!r} has shape {tensors[k].shape}, expected {model.params[k].shape}")
        model.params[k] = tensors[k].copy()


def load_model(path, expect: str | None = None) -> NextTokenModel | FlowPolicy:
    kind, t = read_tensors(path)
    if expect is not None and kind != expect:
        raise CheckpointError(f"{path}: holds a {kind} model, expected {expect}")
    cfg = t.get("config")
    if cfg is None:
        raise CheckpointError(f"{path}: missing config tensor")
    if kind == "count":
        order, alpha, vocab = cfg.tolist()
        model = CountModel(int(order), _meta_float(alpha), int(vocab))
        flat = t["tokens"].astype(np.int64).tolist()
        seqs, pos = [], 0
        for n in t["lengths"].astype(np.int64).tolist():
            seqs.append(flat[pos:pos + n])
            pos += n
        return model.fit(seqs)
    if kind == "context_mlp":
        c, e, h, v = (int(x) for x in cfg.tolist())
        model = ContextMLP(context=c, embed_dim=e, hidden=h, vocab_size=v)
        _load_params(model, t, path)
        return model
    hidden, use_goal, scale, head = cfg.tolist()
    model = FlowPolicy(hidden=int(hidden), use_goal=bool(use_goal), action_scale=_meta_float(scale), head=_HEADS[int(head)])
    _load_params(model, t, path)
    return model


# ---------------------------------------------------------------- curves

def write_curve(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{float(v):.9g}"])


def read_curve(path) -> list[float]:
    with open(path, newline="") as f:
        return [float(r["loss"]) for r in csv.DictReader(f)]


# ---------------------------------------------------------------- dataset cache
# Header:  b"VSTD" u16 version, u32 episode count, per episode (u16 length, utf-8 id), u32 record count.
# Record (float32 x RECORD_WIDTH): obs 512 | goal 512 | proprio 4 | tokens 16 (-1 = none)
#                                  | stage | episode index | frame | target 120

DATASET_MAGIC = b"VSTD"
RECORD_WIDTH = 2 * RASTER_FEATS + PROPRIO_DIM + MAX_TEXT_TOKENS + 3 + CHUNK * ACT_DIM


def save_dataset(ds: PolicyDataset, path) -> None:
    episodes = sorted({k[0] for k in ds.keys})
    index = {e: i for i, e in enumerate(episodes)}
    toks = np.full((len(ds), MAX_TEXT_TOKENS), -1.0, dtype=np.float32)
    for i, t in enumerate(ds.tokens):
        toks[i, :len(t)] = t
    meta = np.array([[s, index[e], f] for s, (e, f) in zip(ds.stage.tolist(), ds.keys)], dtype=np.float32)
    rec = np.concatenate([ds.obs, ds.goal, ds.proprio, toks, meta.reshape(-1, 3),
                          ds.target.reshape(len(ds), -1)], axis=1).astype("<f4")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC + struct.pack("<HI", VERSION, len(episodes)))
    for e in episodes:
        raw = e.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<I", len(ds)))
    buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> PolicyDataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise CheckpointError(f"{path}: not a dataset cache")
    version, n_ep = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported dataset version {version}")
    pos = 10
    episodes = []
    for _ in range(n_ep):
        (n,) = struct.unpack_from("<H", data, pos)
        episodes.append(data[pos + 2:pos + 2 + n].decode("utf-8"))
        pos += 2 + n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) - pos != 4 * count * RECORD_WIDTH:
        raise CheckpointError(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(data, dtype="<f4", offset=pos).reshape(count, RECORD_WIDTH).astype(np.float32)
    r = RASTER_FEATS
    cut = np.cumsum([r, r, PROPRIO_DIM, MAX_TEXT_TOKENS, 3])
    obs, goal, prop, toks, meta, target = np.split(rec, cut, axis=1)
    tokens = [tuple(int(v) for v in row if v >= 0) for row in toks]
    keys = [(episodes[int(e)], int(f)) for e, f in meta[:, 1:]]
    return PolicyDataset(obs.copy(), goal.copy(), prop.copy(), tokens, target.reshape(count, CHUNK, ACT_DIM).copy(),
                         meta[:, 0].astype(np.int32), keys)
