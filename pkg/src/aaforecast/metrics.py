"""Forecast scores, evaluation protocols and the ablation runner."""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import PreparedSeries, prepare_series
from .model import AAModel, ModelConfig, TrainConfig, encode_series, train
from .series import Dataset, SeriesError, train_length
from .star import DecompositionConfig
from .uncertainty import DEFAULT_GRID, DEFAULT_SAMPLES, optimize_encoded, static_encoded

PROTOCOLS = ("80-20", "zero-shot", "ablation")
VARIANTS = ("full", "no-attention", "no-star", "no-uncertainty")


def crps(samples, y: float) -> float:
    """Empirical-ensemble CRPS: ``E|S - y| - 0.5 E|S - S'|``.

    Equal to the integral of ``(F(z) - 1{z >= y})^2`` with ``F`` the ensemble's
    empirical CDF. The pairwise term uses the sorted-sample identity
    ``sum_ij |s_i - s_j| = 2 sum_k (2k - M - 1) s_(k)``.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    M = s.size
    if M == 0:
        raise ValueError("CRPS of an empty ensemble")
    if s[0] == s[-1]:
        # point mass: the integral is exactly the absolute error
        return float(abs(s[0] - y))
    term1 = np.abs(s - y).mean()
    k = np.arange(1, M + 1)
    pair = 2.0 * np.sum((2 * k - M - 1) * s) / (M * M)
    return float(max(term1 - 0.5 * pair, 0.0))


def rmse(points, observed) -> float:
    points = np.asarray(points, dtype=float).ravel()
    observed = np.asarray(observed, dtype=float).ravel()
    if points.size != observed.size:
        raise ValueError(f"length mismatch: {points.size} forecasts vs {observed.size} observations")
    if points.size == 0:
        raise ValueError("RMSE of nothing")
    return float(np.sqrt(np.mean((points - observed) ** 2)))


def workers() -> int:
    try:
        n = int(os.environ.get("AA_FORECAST_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


@dataclass
class StepRecord:
    series_id: str
    t: int
    observed: float
    mean: float
    sd: float
    p_star: float
    crps: float
    sq_err: float
    critical: bool
    q05: float
    q50: float
    q95: float


def summarize(steps) -> dict:
    if not steps:
        return {"crps": float("nan"), "rmse": float("nan"), "sd": float("nan"), "n": 0}
    return {
        "crps": float(np.mean([s.crps for s in steps])),
        "rmse": float(math.sqrt(np.mean([s.sq_err for s in steps]))),
        "sd": float(np.mean([s.sd for s in steps])),
        "n": len(steps),
    }


@dataclass
class EvalReport:
    protocol: str
    tau: int
    variant: str = "full"
    steps: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        return summarize(self.steps)

    @property
    def critical(self) -> dict:
        return summarize([s for s in self.steps if s.critical])

    @property
    def per_series(self) -> dict:
        ids = dict.fromkeys(s.series_id for s in self.steps)
        return {i: summarize([s for s in self.steps if s.series_id == i]) for i in ids}

    def to_dict(self, with_steps: bool = False) -> dict:
        out = {"protocol": self.protocol, "tau": self.tau, "variant": self.variant,
               "aggregate": self.aggregate, "critical": self.critical,
               "per_series": self.per_series, "config": self.config}
        if with_steps:
            out["steps"] = [asdict(s) for s in self.steps]
        return out


def _series_key(sid: str) -> int:
    return zlib.crc32(sid.encode("utf-8"))


def forecast_series(model: AAModel, prep: PreparedSeries, first_target: int, *, grid=DEFAULT_GRID,
                    n_samples: int = DEFAULT_SAMPLES, seed: int = 0, static_p: float | None = None) -> list:
    """Probabilistic one-step forecasts for every target index ``>= first_target``."""
    enc = encode_series(model, prep, first_end=first_target - 1)
    key = _series_key(prep.id)
    records = []
    for A, t, y in zip(enc.A, enc.ends, enc.labels):
        step_seed = [seed, key]
        if static_p is None:
            dist = optimize_encoded(model, A, grid, n_samples, seed=_mix(step_seed), step=int(t))
        else:
            dist = static_encoded(model, A, static_p, n_samples, seed=_mix(step_seed), step=int(t))
        q05, q50, q95 = dist.quantiles()
        records.append(StepRecord(prep.id, int(t), float(y), dist.mean, dist.sd, dist.chosen_p,
                                  crps(dist.samples, y), (dist.mean - y) ** 2,
                                  bool(prep.critical[t + 1]), float(q05), float(q50), float(q95)))
    return records


def _mix(parts) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def prepare_for(data, protocol: str, channels: str, decomp: DecompositionConfig | None, cache=None) -> list:
    """Prepared series for a protocol: 80-20 fits on the older 80%, zero-shot on whole series."""
    out = []
    for s in data:
        fit = train_length(len(s)) if protocol == "80-20" else len(s)
        key = (s.id, fit, channels)
        if cache is not None and key in cache:
            out.append(cache[key])
            continue
        prep = prepare_series(s, decomp, fit_len=fit, channels=channels)
        if cache is not None:
            cache[key] = prep
        out.append(prep)
    return out


def evaluate(model: AAModel, test: Dataset, protocol: str = "80-20", tau: int | None = None, *,
             grid=DEFAULT_GRID, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             decomp: DecompositionConfig | None = None, train_ids=(), static_p: float | None = None,
             variant: str = "full", prepared: list | None = None, config: dict | None = None,
             first_target: int | None = None) -> EvalReport:
    """Score ``model`` on ``test`` under a protocol.

    ``80-20`` forecasts the last 20% of each series given the rest as history;
    ``zero-shot`` forecasts every step of series never used in training and
    refuses any id in ``train_ids``. ``static_p`` replaces the per-step
    dropout search by a fixed probability. ``first_target`` moves the first
    scored index later, e.g. to score several window lengths on the same steps.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if tau is not None and tau != model.tau:
        raise ValueError(f"model was trained with tau={model.tau}, got tau={tau}")
    series = list(test)
    if not series:
        raise SeriesError("empty test set")
    if protocol == "zero-shot":
        overlap = sorted(set(s.id for s in series) & set(train_ids))
        if overlap:
            raise ValueError(f"zero-shot test series were used in training: {overlap}")
    split = "80-20" if protocol != "zero-shot" else "zero-shot"
    preps = prepared or prepare_for(series, split, model.config.channels, decomp)

    def run(prep):
        first = prep.fit_len if split == "80-20" else model.tau
        if first_target is not None:
            first = max(first, first_target)
        return forecast_series(model, prep, first, grid=grid, n_samples=n_samples, seed=seed, static_p=static_p)

    n = workers()
    if n > 1 and len(preps) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            chunks = list(pool.map(run, preps))
    else:
        chunks = [run(p) for p in preps]
    report = EvalReport(protocol, model.tau, variant, [r for c in chunks for r in c], dict(config or {}))
    report.config.setdefault("grid", list(grid) if static_p is None else [static_p])
    report.config.setdefault("mc_samples", n_samples)
    report.config.setdefault("seed", seed)
    return report


def train_variant(variant: str, train_data, protocol: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  decomp: DecompositionConfig | None = None, cache=None):
    """Train the model behind an ablation variant; ``no-uncertainty`` shares the full model."""
    changes = {}
    if variant == "no-attention":
        changes["use_attention"] = False
    elif variant == "no-star":
        changes["channels"] = "raw"
    elif variant not in ("full", "no-uncertainty"):
        raise ValueError(f"unknown variant {variant!r}")
    cfg = ModelConfig(**{**asdict(model_cfg), **changes})
    model = AAModel(cfg)
    split = "80-20" if protocol != "zero-shot" else "zero-shot"
    preps = prepare_for(train_data, split, cfg.channels, decomp, cache)
    result = train(model, preps, train_cfg)
    return model, result


def run_ablation(train_data: Dataset, test_data: Dataset, protocol: str = "80-20", *,
                 model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 decomp: DecompositionConfig | None = None, variants=VARIANTS, grid=DEFAULT_GRID,
                 n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> dict:
    """Paired reports for the full model and each ablated variant, on the same test data."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    cache: dict = {}
    split = "80-20" if protocol != "zero-shot" else "zero-shot"
    models = {}
    reports = {}
    for v in variants:
        base = "full" if v == "no-uncertainty" else v
        if base not in models:
            models[base] = train_variant(base, train_data, split, model_cfg, train_cfg, decomp, cache)[0]
        model = models[base]
        preps = prepare_for(test_data, split, model.config.channels, decomp, cache)
        static_p = model.config.static_dropout if v == "no-uncertainty" else None
        reports[v] = evaluate(model, test_data, split, grid=grid, n_samples=n_samples, seed=seed, decomp=decomp,
                              train_ids=train_data.ids if split == "zero-shot" else (), static_p=static_p,
                              variant=v, prepared=preps, config={"ablation": v})
        reports[v].protocol = "ablation"
    return reports
