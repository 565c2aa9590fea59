"""Small numpy kernels with hand-written gradients.

Every parameter is a 2-D float64 array held in a :class:`ParamStore` next to a
same-shape gradient buffer. Forward functions return a cache that the matching
backward function consumes exactly once.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "aaforecast.checkpoint"
CHECKPOINT_VERSION = 1


class CacheError(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Cache(dict):
    """Forward intermediates; a second backward over the same cache is an error."""

    consumed = False

    def take(self) -> "Cache":
        if self.consumed:
            raise CacheError("forward cache already consumed by a backward pass")
        self.consumed = True
        return self


class ParamStore:
    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=float)
        if value.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def accumulate(self, name, grad):
        self.grads[name] += np.reshape(grad, self.grads[name].shape)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        for k, v in state.items():
            self.params[k][...] = v

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def uniform_init(rng, shape, fan_in) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# activations


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(v, mask=None, axis=-1):
    """Softmax along ``axis``; masked-out entries get weight 0.

    Slices whose mask is entirely False come back as all zeros.
    """
    v = np.asarray(v, dtype=float)
    if mask is None:
        shifted = v - v.max(axis=axis, keepdims=True)
        ex = np.exp(shifted)
        return ex / ex.sum(axis=axis, keepdims=True)
    shape = np.broadcast_shapes(np.shape(mask), v.shape)
    mask = np.broadcast_to(mask, shape)
    v = np.broadcast_to(v, shape)
    big = np.where(mask, v, -np.inf)
    top = big.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ex = np.where(mask, np.exp(np.where(mask, v, 0.0) - top), 0.0)
    total = ex.sum(axis=axis, keepdims=True)
    return ex / np.where(total > 0, total, 1.0)


def softmax_backward(alpha, dalpha, axis=-1):
    return alpha * (dalpha - (alpha * dalpha).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# dense layer


def dense_forward(x, W, b):
    cache = Cache(x=x, W=W)
    return x @ W + b, cache


def dense_backward(cache: Cache, dy):
    cache = cache.take()
    x, W = cache["x"], cache["W"]
    dy = np.reshape(dy, (x.shape[0], W.shape[1]))
    return dy @ W.T, x.T @ dy, dy.sum(axis=0, keepdims=True)


# --------------------------------------------------------------------------
# recurrent cells


@dataclass
class CellParams:
    """Gate weights for a GRU (gates z, r, n) or LSTM (gates i, f, g, o)."""

    kind: str
    input_size: int
    hidden_size: int
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.kind not in ("gru", "lstm"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        g = self.gates * self.hidden_size
        if self.W.shape != (self.input_size, g) or self.U.shape != (self.hidden_size, g) or self.b.shape != (1, g):
            raise ValueError(f"{self.kind} parameter shapes inconsistent with "
                             f"input={self.input_size}, hidden={self.hidden_size}")

    @property
    def gates(self) -> int:
        return 3 if self.kind == "gru" else 4

    @classmethod
    def init(cls, kind, input_size, hidden_size, rng) -> "CellParams":
        g = (3 if kind == "gru" else 4) * hidden_size
        return cls(kind, input_size, hidden_size,
                   uniform_init(rng, (input_size, g), hidden_size),
                   uniform_init(rng, (hidden_size, g), hidden_size),
                   uniform_init(rng, (1, g), hidden_size))

    @classmethod
    def zeros(cls, kind, input_size, hidden_size) -> "CellParams":
        g = (3 if kind == "gru" else 4) * hidden_size
        return cls(kind, input_size, hidden_size, np.zeros((input_size, g)),
                   np.zeros((hidden_size, g)), np.zeros((1, g)))


def cell_forward(p: CellParams, x, h_prev, c_prev=None):
    """One recurrent step on a batch. Returns ``(h, c, cache)``; ``c`` is None for GRU."""
    x = np.atleast_2d(x)
    h_prev = np.atleast_2d(h_prev)
    if x.shape[1] != p.input_size or h_prev.shape[1] != p.hidden_size or x.shape[0] != h_prev.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h_prev.shape} for "
                         f"{p.kind}(input={p.input_size}, hidden={p.hidden_size})")
    H = p.hidden_size
    if p.kind == "gru":
        xw = x @ p.W + p.b
        hu = h_prev @ p.U[:, :2 * H]
        z = sigmoid(xw[:, :H] + hu[:, :H])
        r = sigmoid(xw[:, H:2 * H] + hu[:, H:])
        rh = r * h_prev
        n = np.tanh(xw[:, 2 * H:] + rh @ p.U[:, 2 * H:])
        h = (1.0 - z) * n + z * h_prev
        return h, None, Cache(kind="gru", x=x, h_prev=h_prev, z=z, r=r, n=n, rh=rh)
    if c_prev is None:
        c_prev = np.zeros_like(h_prev)
    c_prev = np.atleast_2d(c_prev)
    pre = x @ p.W + h_prev @ p.U + p.b
    i = sigmoid(pre[:, :H])
    f = sigmoid(pre[:, H:2 * H])
    g = np.tanh(pre[:, 2 * H:3 * H])
    o = sigmoid(pre[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, Cache(kind="lstm", x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, g=g, o=o, tc=tc)


def cell_backward(p: CellParams, cache: Cache, dh, dc=None):
    """Backward of :func:`cell_forward`. Returns ``(dx, dh_prev, dc_prev, dW, dU, db)``."""
    cache = cache.take()
    H = p.hidden_size
    x, h_prev = cache["x"], cache["h_prev"]
    if cache["kind"] == "gru":
        z, r, n, rh = cache["z"], cache["r"], cache["n"], cache["rh"]
        dz = dh * (h_prev - n) * z * (1.0 - z)
        dn = dh * (1.0 - z) * (1.0 - n * n)
        Un = p.U[:, 2 * H:]
        drh = dn @ Un.T
        dr = drh * h_prev * r * (1.0 - r)
        dgates = np.concatenate([dz, dr, dn], axis=1)
        dW = x.T @ dgates
        db = dgates.sum(axis=0, keepdims=True)
        dU = np.concatenate([h_prev.T @ dz, h_prev.T @ dr, rh.T @ dn], axis=1)
        dx = dgates @ p.W.T
        dh_prev = dh * z + drh * r + dz @ p.U[:, :H].T + dr @ p.U[:, H:2 * H].T
        return dx, dh_prev, None, dW, dU, db
    i, f, g, o, tc, c_prev = (cache[k] for k in ("i", "f", "g", "o", "tc", "c_prev"))
    if dc is None:
        dc = np.zeros_like(dh)
    dc_total = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc * o * (1.0 - o)
    di = dc_total * g * i * (1.0 - i)
    df = dc_total * c_prev * f * (1.0 - f)
    dg = dc_total * i * (1.0 - g * g)
    dgates = np.concatenate([di, df, dg, do], axis=1)
    dW = x.T @ dgates
    dU = h_prev.T @ dgates
    db = dgates.sum(axis=0, keepdims=True)
    return dgates @ p.W.T, dgates @ p.U.T, dc_total * f, dW, dU, db


# --------------------------------------------------------------------------
# dropout, loss, optimizers


def dropout_mask(p: float, n, rng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(n)
    keep = rng.random(n) >= p
    return keep / (1.0 - p)


def mse(pred, target):
    pred = np.asarray(pred, dtype=float)
    diff = pred - np.asarray(target, dtype=float)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _check_finite(store: ParamStore):
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")


def sgd_step(store: ParamStore, lr: float, weight_decay: float = 0.0):
    """``theta <- theta - lr * (grad + weight_decay * theta)``, then zero the gradients."""
    _check_finite(store)
    for name, theta in store.params.items():
        theta -= lr * (store.grads[name] + weight_decay * theta)
    store.zero_grad()


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, store: ParamStore, lr: float, weight_decay: float = 0.0):
        _check_finite(store)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, theta in store.params.items():
            g = store.grads[name]
            m = self.m.setdefault(name, np.zeros_like(theta))
            v = self.v.setdefault(name, np.zeros_like(theta))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            theta -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * theta)
        store.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_record(store: ParamStore, hyper: dict) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hyper": hyper,
        "params": [{"name": k, "shape": list(v.shape), "values": v.ravel().tolist()}
                   for k, v in store.params.items()],
    }


def save_checkpoint(path, store: ParamStore, hyper: dict):
    path = Path(path)
    payload = json.dumps(checkpoint_record(store, hyper), indent=1, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(store, hyper)`` from a JSON checkpoint."""
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an aaforecast checkpoint")
    if rec.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {rec.get('version')}")
    store = ParamStore()
    for p in rec["params"]:
        store.add(p["name"], np.array(p["values"], dtype=float).reshape(p["shape"]))
    return store, rec["hyper"]
