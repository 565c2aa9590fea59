"""Multiplicative seasonal / trend / anomaly / residual decomposition.

The series is split as ``x + offset = s * t * a * r``. The trend comes from a
degree-1 LOESS smoother, seasonal indices from per-phase means of the
detrended series, and anomalies are the residual points whose median-centred
robustness score ranks in the top ``p`` fraction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

EPS_FLOOR = 1e-12


class DecompositionError(ValueError):
    pass


@dataclass
class DecompositionConfig:
    span: float = 0.3
    p: float = 0.05
    robust_iterations: int = 0
    # alternate trend and seasonal fits; 0 is a single trend-first pass
    refine_iterations: int = 10
    # residual spreads below this are treated as noise-free (no anomalies)
    degenerate_tol: float = 1e-9

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecomposedSeries:
    s: np.ndarray
    t: np.ndarray
    a: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    rho_c: float
    offset: float
    cycle: int = 1
    span: float = 0.3

    def reconstruct(self) -> np.ndarray:
        return self.s * self.t * self.a * self.r

    @property
    def anomalies(self) -> np.ndarray:
        return np.flatnonzero(self.a != 1)

    def meta(self) -> dict:
        return {"offset": self.offset, "rho_c": self.rho_c, "span": self.span, "cycle": self.cycle}


def _tricube(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def _neighbourhoods(T: int, q: int):
    lo = np.clip(np.arange(T) - (q - 1) // 2, 0, T - q)
    cols = lo[:, None] + np.arange(q)[None, :]
    offsets = cols - np.arange(T)[:, None]
    return cols, offsets.astype(float)


def loess_trend(x, span: float = 0.3, robust_iterations: int = 0) -> np.ndarray:
    """Local linear regression on the time index with tricube weights.

    Each point is fitted from its ``ceil(span*T)`` nearest neighbours. The
    bandwidth sits one step beyond the farthest neighbour so every neighbour
    keeps a positive weight.
    """
    x = np.asarray(x, dtype=float)
    T = len(x)
    if T < 4:
        raise DecompositionError("LOESS needs at least 4 points")
    if np.any(x <= 0):
        raise DecompositionError("LOESS input must be strictly positive")
    if not 0 < span <= 1:
        raise DecompositionError("span must lie in (0, 1]")
    q = int(math.ceil(span * T))
    if q < 2:
        raise DecompositionError(f"span*T={span * T:.3g} < 2 leaves the local fit underdetermined")

    cols, xs = _neighbourhoods(T, q)
    dist = np.abs(xs)
    base = _tricube(dist / (dist.max(axis=1, keepdims=True) + 1.0))
    y = x[cols]
    robust = np.ones(T)
    for _ in range(robust_iterations + 1):
        w = base * robust[cols]
        sw, swx, swxx = w.sum(1), (w * xs).sum(1), (w * xs * xs).sum(1)
        swy, swxy = (w * y).sum(1), (w * xs * y).sum(1)
        det = sw * swxx - swx * swx
        flat = np.abs(det) <= 1e-12 * np.maximum(sw * swxx, 1e-300)
        safe = np.where(flat, 1.0, det)
        # local line evaluated at its own centre (offset 0)
        fit = np.where(flat, swy / sw, (swxx * swy - swx * swxy) / safe)
        if robust_iterations:
            res = np.abs(x - fit)
            m = np.median(res)
            # residual scale ~0 means the fit is already exact away from a few points
            if m <= 1e-7 * res.mean():
                break
            robust = _bisquare(res / (6.0 * m))
    return np.maximum(fit, EPS_FLOOR)


def _bisquare(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 2) ** 2


def seasonal_indices(detrended, cycle: int) -> np.ndarray:
    """Per-phase means of the detrended series, rescaled to mean 1 and tiled."""
    detrended = np.asarray(detrended, dtype=float)
    if cycle < 2:
        raise DecompositionError("cycle must be at least 2")
    T = len(detrended)
    if T < 2 * cycle:
        raise DecompositionError(f"need at least two cycles ({2 * cycle} points), got {T}")
    phase = np.arange(T) % cycle
    means = np.bincount(phase, weights=detrended, minlength=cycle) / np.bincount(phase, minlength=cycle)
    means = means / means.mean()
    return means[phase]


def robustness_scores(r) -> np.ndarray:
    """Median-centred absolute deviation over the root of the mean absolute deviation."""
    r = np.asarray(r, dtype=float)
    T = len(r)
    if T < 2:
        raise DecompositionError("robustness scores need at least 2 residuals")
    dev = np.abs(r - np.median(r))
    denom = math.sqrt(dev.sum() / (T - 1))
    if denom == 0:
        raise DecompositionError("degenerate residuals: every residual equals the median")
    return dev / denom


def threshold(rho, p: float = 0.05, rank_offset: int = 0) -> float:
    """Score at descending rank ``ceil(p*T) + rank_offset`` (1-based)."""
    rho = np.asarray(rho, dtype=float)
    if rho.size == 0:
        raise DecompositionError("threshold of an empty score vector")
    if not 0 < p < 1:
        raise DecompositionError("p must lie in (0, 1)")
    rank = math.ceil(p * rho.size) + rank_offset
    rank = min(max(rank, 1), rho.size)
    return float(np.sort(rho)[::-1][rank - 1])


def extract_anomalies(r, rho, rho_c: float) -> tuple:
    """Move residuals with score strictly above ``rho_c`` into the anomaly channel."""
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if r.shape != rho.shape:
        raise DecompositionError("residuals and scores differ in length")
    flagged = rho > rho_c
    a = np.where(flagged, r, 1.0)
    r_adj = np.where(flagged, 1.0, r)
    return a, r_adj


def positivity_offset(x) -> float:
    x = np.asarray(x, dtype=float)
    med = float(np.median(np.abs(x)))
    eps = 1e-6 * med if med > 0 else 1e-6
    return max(0.0, eps - float(x.min()))


def decompose(x, e=None, cycle: int = 12, cfg: DecompositionConfig | None = None) -> DecomposedSeries:
    """Full decomposition pipeline on one series.

    The trend is first smoothed from the raw (shifted) series; each refinement
    pass then re-smooths the deseasonalized series and re-averages the seasonal
    indices, which removes seasonal leakage from the trend.

    The flag budget is ``ceil(p*T)``: the threshold is the largest score left
    outside the top ``ceil(p*T)``, so (ties aside) exactly that many points
    carry an anomaly.
    """
    cfg = cfg or DecompositionConfig()
    x = np.asarray(x, dtype=float)
    T = len(x)
    if cycle < 2 or T < 2 * cycle:
        raise DecompositionError(f"decomposition needs cycle >= 2 and T >= 2*cycle (T={T}, cycle={cycle})")
    offset = positivity_offset(x)
    shifted = x + offset
    trend = loess_trend(shifted, cfg.span, cfg.robust_iterations)
    seasonal = seasonal_indices(shifted / trend, cycle)
    for _ in range(cfg.refine_iterations):
        trend = loess_trend(shifted / seasonal, cfg.span, cfg.robust_iterations)
        seasonal = seasonal_indices(shifted / trend, cycle)
    resid = shifted / (seasonal * trend)

    spread = np.abs(resid - np.median(resid)).max()
    if spread <= cfg.degenerate_tol:
        rho = np.zeros(T)
        rho_c = 0.0
        a = np.ones(T)
        r = resid
    else:
        rho = robustness_scores(resid)
        rho_c = threshold(rho, cfg.p, rank_offset=1)
        a, r = extract_anomalies(resid, rho, rho_c)
    return DecomposedSeries(seasonal, trend, a, r, rho, rho_c, offset, cycle, cfg.span)
