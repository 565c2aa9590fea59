"""Seeded synthetic corpora with injected anomalies and extreme-event episodes."""

from __future__ import annotations

import numpy as np

from .series import Dataset, RawSeries, ScenarioConfig, synth_generate


def _episode_starts(rng, T, n, gap, margin):
    """Up to ``n`` starts spread over ``[margin, T)``, jittered, at least ``gap`` apart."""
    span = T - margin
    n = min(n, max(span // gap, 0))
    if n <= 0:
        return []
    slot = span // n
    slack = slot - gap
    return [margin + k * slot + int(rng.integers(0, slack + 1)) for k in range(n)]


def event_corpus(n_series: int = 16, seed: int = 0, T: int = 144, cycle: int = 12, noise: float = 0.02,
                 episodes: int = 6, gap: int = 18, n_spikes: int = 2, gains=(-0.35, 0.35),
                 rebound: bool = False) -> Dataset:
    """Series whose extreme-event episodes hit with a series-specific delayed impact.

    Each episode flags consecutive steps with an event level. The value is
    untouched on the first flagged step and scaled by ``1 + gain`` on the
    second, with ``gain`` picked once per series from ``gains``. With
    ``rebound`` a third flagged step is scaled by ``1 - gain`` so the episode
    leaves the series level unbiased. At the onset, the size of the coming
    impact is only known from that series' earlier episodes.
    """
    length = 3 if rebound else 2
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_series):
        cfg = ScenarioConfig(T=T, cycle=cycle, level=float(rng.uniform(5, 20)),
                             slope=float(rng.uniform(-0.01, 0.03)), amp=[float(rng.uniform(0.05, 0.25))],
                             noise=noise, series_id=f"s{k:03d}")
        starts = _episode_starts(rng, T - length + 1, episodes, gap, margin=4)
        levels = rng.integers(1, 4, size=len(starts)).astype(float)
        cfg.events = [(s + j, float(lv)) for s, lv in zip(starts, levels) for j in range(length)]
        busy = {i for i, _ in cfg.events}
        free = np.array([i for i in range(2, T - 1) if i not in busy])
        spike_at = rng.choice(free, n_spikes, replace=False)
        cfg.anomalies = [(int(i), float(rng.choice([0.6, 1.6]))) for i in spike_at]
        s = synth_generate(cfg, int(rng.integers(2**31)))
        gain = float(rng.choice(gains))
        x = s.values.copy()
        for st in starts:
            x[st + 1] *= 1.0 + gain
            if rebound:
                x[st + 2] *= 1.0 - gain
        out.append(RawSeries(s.id, s.timestamps, x, s.events, cycle))
    return Dataset(out)


def motif_corpus(n_series: int = 16, seed: int = 0, T: int = 160, cycle: int = 4, noise: float = 0.01,
                 motifs=((5, 0.06), (11, 0.06), (23, 0.06))) -> Dataset:
    """Series carrying repeating random motifs of several periods.

    A motif of period ``L`` is only predictable from a window of at least ``L``
    steps, so longer windows see strictly more of the predictable structure.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_series):
        cfg = ScenarioConfig(T=T, cycle=cycle, level=float(rng.uniform(5, 20)), slope=0.0,
                             amp=[float(rng.uniform(0.0, 0.05))], noise=noise,
                             patterns=list(motifs), series_id=f"m{k:03d}")
        out.append(synth_generate(cfg, int(rng.integers(2**31))))
    return Dataset(out)
