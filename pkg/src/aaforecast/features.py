"""Turn a raw series into the normalized feature matrix the model consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series import Normalizer, RawSeries, SeriesError, make_windows, train_length
from .star import DecomposedSeries, DecompositionConfig, decompose

CHANNEL_SETS = {"star": ("x", "e", "s", "t", "a", "r"), "raw": ("x", "e")}


@dataclass
class PreparedSeries:
    id: str
    features: np.ndarray
    critical: np.ndarray
    normalizer: Normalizer
    decomposition: DecomposedSeries | None
    fit_len: int
    raw: RawSeries

    def __len__(self):
        return self.features.shape[0]

    @property
    def target(self) -> np.ndarray:
        return self.features[:, 0]

    def windows(self, tau: int, start: int = 0):
        return make_windows(self.features, tau, series_id=self.id, critical=self.critical, start=start)


def prepare_series(raw: RawSeries, decomp: DecompositionConfig | None = None, *,
                   fit_len: int | None = None, channels: str = "star") -> PreparedSeries:
    """Decompose ``raw`` and build the feature matrix.

    ``x`` and the trend are z-scored with statistics from the first ``fit_len``
    points (default: the 80% training segment). The event channel is a level
    code and passes through unchanged, as do the dimensionless ``s``, ``a`` and
    ``r`` factors. With ``channels="raw"`` only ``(x, e)`` are kept and the
    critical mask comes from events alone.
    """
    if channels not in CHANNEL_SETS:
        raise SeriesError(f"unknown channel set {channels!r}")
    T = len(raw)
    fit_len = train_length(T) if fit_len is None else fit_len
    if not 1 <= fit_len <= T:
        raise SeriesError(f"fit length {fit_len} outside [1, {T}]")
    norm = Normalizer.fit(raw.values[:fit_len])
    x = norm.normalize(raw.values)
    e = raw.events
    if channels == "raw":
        return PreparedSeries(raw.id, np.column_stack([x, e]), e != 0, norm, None, fit_len, raw)
    d = decompose(raw.values, e, raw.cycle, decomp)
    trend = norm.normalize(d.t - d.offset)
    feats = np.column_stack([x, e, d.s, trend, d.a, d.r])
    critical = (e != 0) | (d.a != 1)
    return PreparedSeries(raw.id, feats, critical, norm, d, fit_len, raw)
