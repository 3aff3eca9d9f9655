"""Small hand-rolled tanh MLP used by both learned models, plus momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


class TanhMLP:
    """in -> [tanh hidden]* -> linear out.  Parameters live in a caller-owned dict."""

    def __init__(self, prefix: str, sizes: list[int]):
        self.prefix = prefix
        self.sizes = sizes

    def names(self) -> list[str]:
        out = []
        for k in range(len(self.sizes) - 1):
            out += [f"{self.prefix}w{k + 1}", f"{self.prefix}b{k + 1}"]
        return out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = {}
        for k, (a, b) in enumerate(zip(self.sizes, self.sizes[1:])):
            p[f"{self.prefix}w{k + 1}"] = glorot(rng, a, b)
            p[f"{self.prefix}b{k + 1}"] = np.zeros(b, dtype=np.float32)
        return p

    def forward(self, params, x):
        acts = [x]
        n = len(self.sizes) - 1
        h = x
        for k in range(n):
            h = h @ params[f"{self.prefix}w{k + 1}"] + params[f"{self.prefix}b{k + 1}"]
            if k < n - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, params, acts, dout, grads: dict) -> np.ndarray:
        n = len(self.sizes) - 1
        d = dout
        for k in reversed(range(n)):
            if k < n - 1:
                d = d * (1.0 - acts[k + 1] ** 2)
            w = params[f"{self.prefix}w{k + 1}"]
            grads[f"{self.prefix}w{k + 1}"] = acts[k].T @ d
            grads[f"{self.prefix}b{k + 1}"] = d.sum(axis=0)
            d = d @ w.T
        return d


@dataclass
class MomentumSGD:
    lr: float
    momentum: float = 0.9
    clip: float | None = 10.0
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> float:
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        for k, g in grads.items():
            v = self.velocity.get(k)
            upd = (g * scale).astype(params[k].dtype)
            v = upd if v is None else self.momentum * v + upd
            self.velocity[k] = v
            params[k] -= (self.lr * v).astype(params[k].dtype)
        return norm


def as_dtype(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 10.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict) -> float:
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = g * scale
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)
        return norm
