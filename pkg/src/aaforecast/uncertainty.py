"""Monte-Carlo dropout sampling and per-step dropout-probability search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import AAModel, HiddenBank, encode, head
from .series import FeatureWindow

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_SAMPLES = 100


@dataclass
class ForecastDistribution:
    samples: np.ndarray
    mean: float
    sd: float
    chosen_p: float
    step: int = 0
    grid_sd: dict = field(default_factory=dict)

    def quantiles(self, qs=(0.05, 0.5, 0.95)) -> np.ndarray:
        return np.quantile(self.samples, qs)


def predictive_stats(samples) -> tuple:
    """Sample mean and population standard deviation."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("no samples")
    if np.all(samples == samples[0]):
        # a float mean of identical values can drift by an ulp
        return float(samples[0]), 0.0
    mean = float(samples.mean())
    return mean, float(np.sqrt(np.mean((samples - mean) ** 2)))


def stream(seed: int, step: int, p: float) -> np.random.Generator:
    """Independent generator for one (step, dropout probability) pair."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(round(p * 1_000_000))]))


def sample_encoded(model: AAModel, A, p: float, n_samples: int, rng) -> np.ndarray:
    """``n_samples`` head outputs for one window's per-step outputs ``A`` (tau x H)."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    masks = nn.dropout_mask(p, (n_samples,) + A.shape, rng)
    y, _ = head(model, np.broadcast_to(A, masks.shape), masks)
    return y


def _encode_window(model: AAModel, w: FeatureWindow, bank: HiddenBank | None):
    bh = bm = None
    if bank is not None and len(bank):
        start = w.origin[1] - model.tau + 1 if w.origin else None
        mat = bank.matrix(before=start)
        bh, bm = mat[None], np.ones((1, mat.shape[0]), dtype=bool)
    A, _ = encode(model, w.features[None], w.critical[None], bh, bm)
    return A[0]


def mc_sample(model: AAModel, w: FeatureWindow, p: float, n_samples: int, rng,
              bank: HiddenBank | None = None) -> np.ndarray:
    if n_samples < 2:
        raise ValueError("Monte-Carlo sampling needs at least 2 samples")
    return sample_encoded(model, _encode_window(model, w, bank), p, n_samples, rng)


def optimize_encoded(model: AAModel, A, grid=DEFAULT_GRID, n_samples: int = DEFAULT_SAMPLES,
                     seed: int = 0, step: int = 0) -> ForecastDistribution:
    """Pick the grid probability whose samples have the smallest SD (ties: smaller p)."""
    grid = sorted(float(p) for p in grid)
    if not grid:
        raise ValueError("empty dropout grid")
    best = None
    grid_sd = {}
    for p in grid:
        samples = sample_encoded(model, A, p, n_samples, stream(seed, step, p))
        mean, sd = predictive_stats(samples)
        grid_sd[p] = sd
        if best is None or sd < best.sd:
            best = ForecastDistribution(samples, mean, sd, p, step)
    best.grid_sd = grid_sd
    return best


def dynamic_optimize(model: AAModel, w: FeatureWindow, grid=DEFAULT_GRID, n_samples: int = DEFAULT_SAMPLES,
                     seed: int = 0, bank: HiddenBank | None = None, step: int | None = None) -> ForecastDistribution:
    """Minimum-SD Monte-Carlo forecast for one window. Parameters are only read."""
    if n_samples < 2:
        raise ValueError("Monte-Carlo sampling needs at least 2 samples")
    step = w.origin[1] if step is None and w.origin else (step or 0)
    return optimize_encoded(model, _encode_window(model, w, bank), grid, n_samples, seed, step)


def static_encoded(model: AAModel, A, p: float, n_samples: int = DEFAULT_SAMPLES,
                   seed: int = 0, step: int = 0) -> ForecastDistribution:
    """Monte-Carlo forecast at a fixed dropout probability (same stream as the grid search)."""
    samples = sample_encoded(model, A, p, n_samples, stream(seed, step, p))
    mean, sd = predictive_stats(samples)
    return ForecastDistribution(samples, mean, sd, float(p), step, {float(p): sd})
