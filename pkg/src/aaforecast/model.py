"""Anomaly-aware recurrent forecaster.

A GRU/LSTM runs over a window of feature rows. At critical steps (an event is
active or the anomaly channel differs from 1) the per-step output is replaced
by an attention-weighted mix of every critical hidden state seen so far in the
series; elsewhere the hidden state passes through unchanged. Dropout is applied
to those per-step outputs, which are concatenated into a linear head that
predicts the next value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .features import CHANNEL_SETS, PreparedSeries, prepare_series
from .series import Dataset, FeatureWindow, RawSeries, SeriesError
from .star import DecompositionConfig

log = logging.getLogger(__name__)

# per-dataset training defaults (batch, lr, weight decay, epochs, static dropout)
DATASET_PRESETS = {
    "hurricane": dict(batch_size=128, lr=1e-5, weight_decay=1e-6, epochs=40, static_dropout=0.5),
    "covid19": dict(batch_size=64, lr=3e-5, weight_decay=1e-5, epochs=40, static_dropout=0.4),
    "electricity": dict(batch_size=64, lr=5e-5, weight_decay=1e-4, epochs=40, static_dropout=0.6),
}
DEFAULT_PRESET = "electricity"


class TrainingDivergence(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# critical steps, bank and attention (single-series reference forms)


@dataclass
class CriticalSet:
    indices: np.ndarray

    def __contains__(self, t):
        i = np.searchsorted(self.indices, t)
        return bool(i < len(self.indices) and self.indices[i] == t)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices.tolist())


def critical_set(e, a=None) -> CriticalSet:
    e = np.asarray(e, dtype=float)
    a = np.ones_like(e) if a is None else np.asarray(a, dtype=float)
    if e.shape != a.shape:
        raise SeriesError("event and anomaly sequences differ in length")
    return CriticalSet(np.flatnonzero((e != 0) | (a != 1)))


@dataclass
class AttentionParams:
    w_alpha: np.ndarray
    b_alpha: np.ndarray

    def scores(self, hidden) -> np.ndarray:
        return np.tanh(np.asarray(hidden) @ self.w_alpha[:, 0] + self.b_alpha[0, 0])


class HiddenBank:
    """Hidden states at the critical steps of one series, in time order."""

    def __init__(self, hidden_size: int | None = None):
        self.hidden_size = hidden_size
        self.indices: list = []
        self.vectors: list = []

    def __len__(self):
        return len(self.indices)

    def __contains__(self, t):
        return t in self.indices

    def add(self, t: int, h):
        if self.indices and t <= self.indices[-1]:
            raise ValueError(f"bank index {t} not after {self.indices[-1]}")
        h = np.asarray(h, dtype=float).ravel()
        if self.hidden_size is None:
            self.hidden_size = h.size
        self.indices.append(int(t))
        self.vectors.append(h)

    def matrix(self, before: int | None = None) -> np.ndarray:
        n = len(self.indices) if before is None else int(np.searchsorted(self.indices, before))
        if n == 0:
            return np.zeros((0, self.hidden_size or 0))
        return np.vstack(self.vectors[:n])


def attention_weights(bank: HiddenBank, ap: AttentionParams) -> np.ndarray:
    if len(bank) == 0:
        raise ValueError("attention over an empty bank")
    return nn.softmax(ap.scores(bank.matrix()))


def aa_layer(h_t, t: int, J: CriticalSet, bank: HiddenBank, ap: AttentionParams) -> np.ndarray:
    """Per-step output: ``h_t`` off the critical set, else attention over bank entries up to ``t``."""
    h_t = np.asarray(h_t, dtype=float)
    if t not in J:
        return h_t
    if t not in bank:
        raise ValueError(f"critical step {t} missing from the hidden bank")
    if any(i not in J for i in bank.indices):
        raise ValueError("bank holds a non-critical index")
    H = bank.matrix(before=t + 1)
    alpha = nn.softmax(ap.scores(H))
    return alpha @ H


# --------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    kind: str = "gru"
    n_features: int = 6
    hidden: int = 16
    tau: int = 12
    static_dropout: float = 0.5
    use_attention: bool = True
    channels: str = "star"
    seed: int = 0

    def __post_init__(self):
        if self.channels not in CHANNEL_SETS:
            raise ValueError(f"unknown channel set {self.channels!r}")
        if self.n_features != len(CHANNEL_SETS[self.channels]):
            self.n_features = len(CHANNEL_SETS[self.channels])
        if self.tau < 1 or self.hidden < 1:
            raise ValueError("tau and hidden size must be positive")
        if not 0 <= self.static_dropout < 1:
            raise ValueError("static dropout must lie in [0, 1)")


class AAModel:
    def __init__(self, config: ModelConfig, store: nn.ParamStore | None = None):
        self.config = config
        H, F, tau = config.hidden, config.n_features, config.tau
        if store is None:
            rng = np.random.default_rng(config.seed)
            cell = nn.CellParams.init(config.kind, F, H, rng)
            store = nn.ParamStore()
            store.add("cell.W", cell.W)
            store.add("cell.U", cell.U)
            store.add("cell.b", cell.b)
            store.add("attn.w", nn.uniform_init(rng, (H, 1), H))
            store.add("attn.b", nn.uniform_init(rng, (1, 1), H))
            store.add("head.w", nn.uniform_init(rng, (tau * H, 1), tau * H))
            store.add("head.b", np.zeros((1, 1)))
        self.store = store
        self.cell = nn.CellParams(config.kind, F, H, store["cell.W"], store["cell.U"], store["cell.b"])
        self.attention = AttentionParams(store["attn.w"], store["attn.b"])
        if store["head.w"].shape != (tau * H, 1):
            raise ValueError("head input width must equal tau * hidden")

    @property
    def tau(self) -> int:
        return self.config.tau

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def hyper(self) -> dict:
        return asdict(self.config)

    def variant(self, **changes) -> "AAModel":
        """Same parameters (shared, not copied) under a modified config."""
        cfg = ModelConfig(**{**asdict(self.config), **changes})
        return AAModel(cfg, self.store)

    def copy(self) -> "AAModel":
        store = nn.ParamStore()
        for k, v in self.store.params.items():
            store.add(k, v.copy())
        return AAModel(ModelConfig(**asdict(self.config)), store)

    def save(self, path, extra: dict | None = None):
        nn.save_checkpoint(path, self.store, {"model": self.hyper(), **(extra or {})})

    @classmethod
    def load(cls, path):
        store, hyper = nn.load_checkpoint(path)
        return cls(ModelConfig(**hyper["model"]), store), hyper


def run_cell(model: AAModel, X) -> np.ndarray:
    """Hidden states ``(B, steps, H)`` for each row sequence, from a zero state."""
    B, steps, _ = X.shape
    h = np.zeros((B, model.hidden))
    c = None
    out = np.empty((B, steps, model.hidden))
    for k in range(steps):
        h, c, _ = nn.cell_forward(model.cell, X[:, k], h, c)
        out[:, k] = h
    return out


def encode(model: AAModel, X, crit, bank_h=None, bank_mask=None):
    """Deterministic part of the forward pass: per-step outputs ``A`` of shape ``(B, tau, H)``.

    ``bank_h`` / ``bank_mask`` hold hidden states of earlier critical steps of
    each window's series (treated as constants).
    """
    X = np.asarray(X, dtype=float)
    B, tau, F = X.shape
    cfg = model.config
    if tau != cfg.tau or F != cfg.n_features:
        raise ValueError(f"window shape ({tau}, {F}) does not match model ({cfg.tau}, {cfg.n_features})")
    crit = np.asarray(crit, dtype=bool).reshape(B, tau)
    H = cfg.hidden
    h = np.zeros((B, H))
    c = None
    caches = []
    Hs = np.empty((B, tau, H))
    for k in range(tau):
        h, c, ck = nn.cell_forward(model.cell, X[:, k], h, c)
        caches.append(ck)
        Hs[:, k] = h
    cache = nn.Cache(cells=caches, Hs=Hs, crit=crit, attn=False)
    if not (cfg.use_attention and crit.any()):
        return Hs, cache

    if bank_h is None or np.size(bank_h) == 0:
        bank_h = np.zeros((B, 0, H))
        bank_mask = np.zeros((B, 0), dtype=bool)
    N = bank_h.shape[1]
    Hcat = np.concatenate([bank_h, Hs], axis=1)
    V = model.attention.scores(Hcat)
    causal = np.tril(np.ones((tau, tau), dtype=bool))
    in_window = crit[:, None, :] & causal[None]
    M = np.concatenate([np.broadcast_to(bank_mask[:, None, :], (B, tau, N)), in_window], axis=2)
    M &= crit[:, :, None]
    alpha = nn.softmax(V[:, None, :], M)
    A_att = np.einsum("bkj,bjh->bkh", alpha, Hcat)
    A = np.where(crit[..., None], A_att, Hs)
    cache.update(attn=True, Hcat=Hcat, V=V, alpha=alpha, N=N)
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("non-finite activation in the attention layer")
    return A, cache


def head(model: AAModel, A, masks=None):
    D = A if masks is None else A * masks
    flat = D.reshape(D.shape[0], -1)
    y = flat @ model.store["head.w"][:, 0] + model.store["head.b"][0, 0]
    return y, nn.Cache(flat=flat, masks=masks, shape=A.shape)


def forward_batch(model: AAModel, X, crit, bank_h=None, bank_mask=None, masks=None):
    A, enc = encode(model, X, crit, bank_h, bank_mask)
    y, hc = head(model, A, masks)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite model output")
    return y, nn.Cache(enc=enc, head=hc)


def backward_batch(model: AAModel, cache: nn.Cache, dy) -> np.ndarray:
    """Accumulate parameter gradients into ``model.store``; returns the input gradient."""
    cache = cache.take()
    store = model.store
    hc = cache["head"].take()
    enc = cache["enc"].take()
    dy = np.asarray(dy, dtype=float).ravel()
    store.accumulate("head.w", hc["flat"].T @ dy)
    store.accumulate("head.b", dy.sum())
    dA = (dy[:, None] * store["head.w"][:, 0][None, :]).reshape(hc["shape"])
    if hc["masks"] is not None:
        dA = dA * hc["masks"]

    crit = enc["crit"]
    if enc["attn"]:
        N, Hcat, V, alpha = enc["N"], enc["Hcat"], enc["V"], enc["alpha"]
        ce = crit[..., None]
        dH = np.where(ce, 0.0, dA)
        dAatt = np.where(ce, dA, 0.0)
        dalpha = np.einsum("bkh,bjh->bkj", dAatt, Hcat)
        dHcat = np.einsum("bkj,bkh->bjh", alpha, dAatt)
        dV = nn.softmax_backward(alpha, dalpha).sum(axis=1)
        dpre = dV * (1.0 - V * V)
        store.accumulate("attn.w", np.einsum("bj,bjh->h", dpre, Hcat))
        store.accumulate("attn.b", dpre.sum())
        dHcat += dpre[..., None] * store["attn.w"][:, 0]
        dH = dH + dHcat[:, N:]
    else:
        dH = dA

    B, tau, _ = dH.shape
    dX = np.empty((B, tau, model.config.n_features))
    dh_next = np.zeros((B, model.hidden))
    dc_next = None
    for k in reversed(range(tau)):
        dx, dh_next, dc_next, dW, dU, db = nn.cell_backward(model.cell, enc["cells"][k], dH[:, k] + dh_next, dc_next)
        store.accumulate("cell.W", dW)
        store.accumulate("cell.U", dU)
        store.accumulate("cell.b", db)
        dX[:, k] = dx
    return dX


def forward(model: AAModel, window: FeatureWindow, bank: HiddenBank | None = None,
            p: float = 0.0, rng=None):
    """Single-window forward. Returns ``(y_next, cache)``."""
    if window.tau != model.tau:
        raise ValueError(f"window has {window.tau} steps, model expects {model.tau}")
    start = window.origin[1] - model.tau + 1 if window.origin else None
    bank_h = bank_mask = None
    if bank is not None and len(bank):
        mat = bank.matrix(before=start)
        bank_h = mat[None]
        bank_mask = np.ones((1, mat.shape[0]), dtype=bool)
    masks = None
    if p > 0:
        rng = rng if rng is not None else np.random.default_rng()
        masks = nn.dropout_mask(p, (1, model.tau, model.hidden), rng)
    y, cache = forward_batch(model, window.features[None], window.critical[None], bank_h, bank_mask, masks)
    return float(y[0]), cache


# --------------------------------------------------------------------------
# series-level inference


def bank_vectors(model: AAModel, features, indices) -> np.ndarray:
    """Hidden state at each index ``j`` from running the cell over rows ``max(0, j-tau+1) .. j``."""
    indices = np.asarray(indices, dtype=int)
    out = np.zeros((len(indices), model.hidden))
    if len(indices) == 0:
        return out
    tau = model.tau
    late = indices >= tau - 1
    if late.any():
        X = np.stack([features[j - tau + 1:j + 1] for j in indices[late]])
        out[late] = run_cell(model, X)[:, -1]
    if (~late).any():
        early = indices[~late]
        Hs = run_cell(model, features[None, :early.max() + 1])[0]
        out[~late] = Hs[early]
    return out


@dataclass
class EncodedSeries:
    ends: np.ndarray
    A: np.ndarray
    labels: np.ndarray


def encode_series(model: AAModel, prep: PreparedSeries, first_end: int | None = None,
                  chunk: int = 256) -> EncodedSeries:
    """Per-step outputs for every labelled window of a series, using its own critical history."""
    tau = model.tau
    T = len(prep)
    if T < tau + 1:
        raise SeriesError(f"series {prep.id!r} has {T} points, needs at least tau+1={tau + 1}")
    feats = prep.features
    crit_idx = np.flatnonzero(prep.critical)
    bank = bank_vectors(model, feats, crit_idx) if model.config.use_attention else np.zeros((0, model.hidden))
    first = tau - 1 if first_end is None else max(tau - 1, first_end)
    ends = np.arange(first, T - 1)
    windows = np.lib.stride_tricks.sliding_window_view(feats, (tau, feats.shape[1]))[:, 0]
    cwin = np.lib.stride_tricks.sliding_window_view(prep.critical, tau)
    A = np.empty((len(ends), tau, model.hidden))
    for lo in range(0, len(ends), chunk):
        e = ends[lo:lo + chunk]
        starts = e - tau + 1
        if len(crit_idx) and model.config.use_attention:
            bh = np.broadcast_to(bank[None], (len(e),) + bank.shape)
            bm = crit_idx[None, :] < starts[:, None]
        else:
            bh = bm = None
        A[lo:lo + len(e)], _ = encode(model, windows[starts], cwin[starts], bh, bm)
    return EncodedSeries(ends, A, prep.target[ends + 1])


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-5
    weight_decay: float = 1e-4
    epochs: int = 40
    seed: int = 0
    optimizer: str = "sgd"
    clip: float = 5.0
    val_fraction: float = 0.1

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        values = {k: v for k, v in DATASET_PRESETS[name].items() if k != "static_dropout"}
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainResult:
    model: AAModel
    trace: list = field(default_factory=list)
    best_epoch: int = 0

    def trace_rows(self):
        return [(e, tl, vl) for e, tl, vl in self.trace]


class _WindowTable:
    """All labelled training windows across series, with per-series critical histories."""

    def __init__(self, model: AAModel, series: list, val_fraction: float):
        tau = model.tau
        self.series = series
        Xs, Cs, ys, sidx, starts, is_val = [], [], [], [], [], []
        self.crit_idx = []
        for si, prep in enumerate(series):
            n = prep.fit_len
            ends = np.arange(tau - 1, n - 1)
            self.crit_idx.append(np.flatnonzero(prep.critical[:n]))
            if len(ends) == 0:
                continue
            feats = prep.features
            st = ends - tau + 1
            Xs.append(np.stack([feats[s:s + tau] for s in st]))
            Cs.append(np.stack([prep.critical[s:s + tau] for s in st]))
            ys.append(prep.target[ends + 1])
            sidx.append(np.full(len(ends), si))
            starts.append(st)
            n_val = int(math.floor(val_fraction * len(ends))) if len(ends) >= 5 else 0
            flag = np.zeros(len(ends), dtype=bool)
            if n_val:
                flag[-n_val:] = True
            is_val.append(flag)
        if not Xs:
            raise SeriesError(f"no training windows: every series is shorter than tau+1={tau + 1}")
        self.X = np.concatenate(Xs)
        self.C = np.concatenate(Cs)
        self.y = np.concatenate(ys)
        self.sidx = np.concatenate(sidx)
        self.start = np.concatenate(starts)
        self.val = np.concatenate(is_val)
        self.banks = [np.zeros((0, model.hidden)) for _ in series]
        self.use_bank = model.config.use_attention

    def refresh_banks(self, model: AAModel):
        if not model.config.use_attention:
            return
        for si, prep in enumerate(self.series):
            self.banks[si] = bank_vectors(model, prep.features, self.crit_idx[si])

    def batch(self, rows, hidden):
        sid, st = self.sidx[rows], self.start[rows]
        if not self.use_bank:
            return self.X[rows], self.C[rows], None, None
        counts = [int(np.searchsorted(self.crit_idx[s], a)) for s, a in zip(sid, st)]
        n = max(counts) if counts else 0
        if n == 0:
            return self.X[rows], self.C[rows], None, None
        bh = np.zeros((len(rows), n, hidden))
        bm = np.zeros((len(rows), n), dtype=bool)
        for b, (s, c) in enumerate(zip(sid, counts)):
            if c:
                bh[b, :c] = self.banks[s][:c]
                bm[b, :c] = True
        return self.X[rows], self.C[rows], bh, bm


def _as_prepared(model: AAModel, data, decomp: DecompositionConfig | None) -> list:
    if isinstance(data, Dataset):
        data = list(data)
    out = []
    for item in data:
        if isinstance(item, PreparedSeries):
            out.append(item)
        elif isinstance(item, RawSeries):
            out.append(prepare_series(item, decomp, fit_len=len(item), channels=model.config.channels))
        else:
            raise TypeError(f"cannot train on {type(item).__name__}")
    return out


def evaluate_loss(model: AAModel, table: _WindowTable, rows, batch_size=512) -> float:
    if len(rows) == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, len(rows), batch_size):
        r = rows[lo:lo + batch_size]
        X, C, bh, bm = table.batch(r, model.hidden)
        y, _ = forward_batch(model, X, C, bh, bm)
        total += float(np.sum((y - table.y[r]) ** 2))
    return total / len(rows)


def train(model: AAModel, data, cfg: TrainConfig | None = None,
          decomp: DecompositionConfig | None = None) -> TrainResult:
    """Mini-batch training with static dropout; keeps the parameters with the lowest validation loss.

    ``data`` is a :class:`Dataset`, or a list of raw or prepared series. Only
    windows whose label falls inside each series' fit segment are used; the
    chronologically last ``val_fraction`` of them form the validation set.
    """
    cfg = cfg or TrainConfig()
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.batch_size < 1 or cfg.epochs < 0 or cfg.lr < 0 or cfg.weight_decay < 0:
        raise ValueError("invalid training hyperparameters")
    series = _as_prepared(model, data, decomp)
    table = _WindowTable(model, series, cfg.val_fraction)
    rng = np.random.default_rng(cfg.seed)
    train_rows = np.flatnonzero(~table.val)
    val_rows = np.flatnonzero(table.val)
    select_rows = val_rows if len(val_rows) else train_rows
    adam = nn.Adam() if cfg.optimizer == "adam" else None
    p = model.config.static_dropout
    tau, H = model.tau, model.hidden

    table.refresh_banks(model)
    best = evaluate_loss(model, table, select_rows)
    best_state, best_epoch = model.store.state(), 0
    result = TrainResult(model)
    model.store.zero_grad()
    for epoch in range(1, cfg.epochs + 1):
        table.refresh_banks(model)
        order = rng.permutation(train_rows)
        losses = []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            X, C, bh, bm = table.batch(rows, H)
            masks = nn.dropout_mask(p, (len(rows), tau, H), rng) if p > 0 else None
            try:
                y, cache = forward_batch(model, X, C, bh, bm, masks)
            except FloatingPointError as exc:
                raise TrainingDivergence(f"divergence at epoch {epoch}, batch {bi}: {exc}") from exc
            loss, dy = nn.mse(y, table.y[rows])
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {bi}")
            backward_batch(model, cache, dy)
            nn.clip_grad_norm(model.store, cfg.clip)
            if adam is not None:
                adam.step(model.store, cfg.lr, cfg.weight_decay)
            else:
                nn.sgd_step(model.store, cfg.lr, cfg.weight_decay)
            losses.append(loss)
        table.refresh_banks(model)
        val = evaluate_loss(model, table, val_rows) if len(val_rows) else float("nan")
        score = val if len(val_rows) else evaluate_loss(model, table, train_rows)
        if not math.isfinite(score):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        train_loss = float(np.mean(losses)) if losses else float("nan")
        result.trace.append((epoch, train_loss, val))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val)
        if score < best:
            best, best_state, best_epoch = score, model.store.state(), epoch
    model.store.load_state(best_state)
    result.best_epoch = best_epoch
    return result


# --------------------------------------------------------------------------
# zero-shot


@dataclass
class PointForecast:
    series_id: str
    index: np.ndarray
    value: np.ndarray
    observed: np.ndarray


def zero_shot_forecast(model: AAModel, unseen: RawSeries, tau: int | None = None,
                       decomp: DecompositionConfig | None = None, train_ids=()) -> PointForecast:
    """Deterministic one-step forecasts over a series the model never trained on.

    The series is normalized with its own statistics and attends only to its
    own critical history. No parameter is updated.
    """
    if tau is not None and tau != model.tau:
        raise ValueError(f"model was trained with tau={model.tau}, got tau={tau}")
    if unseen.id in set(train_ids):
        raise ValueError(f"series {unseen.id!r} was part of the training set")
    if len(unseen) < model.tau + 1:
        raise SeriesError(f"series {unseen.id!r} has {len(unseen)} points, needs at least {model.tau + 1}")
    prep = prepare_series(unseen, decomp, fit_len=len(unseen), channels=model.config.channels)
    enc = encode_series(model, prep)
    y, _ = head(model, enc.A)
    return PointForecast(unseen.id, enc.ends + 1, y, enc.labels)
