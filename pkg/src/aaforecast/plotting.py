"""Matplotlib figures written next to the CSV outputs of the command-line tool.

matplotlib is imported on first use, so the library and the delimited outputs
work without it.
"""

from __future__ import annotations

import numpy as np

MAX_PANELS = 6


class PlottingUnavailable(RuntimeError):
    pass


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise PlottingUnavailable("matplotlib is not installed (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 100, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9,
                         "axes.spines.top": False, "axes.spines.right": False})
    return plt


def _save(fig, path):
    # no timestamp metadata, so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    fig.clf()
    import matplotlib.pyplot as plt

    plt.close(fig)


def _shade_events(ax, events):
    on = np.flatnonzero(np.asarray(events) > 0)
    for i in on:
        ax.axvspan(i - 0.5, i + 0.5, color="tab:red", alpha=0.12, lw=0)


def plot_series(dataset, path):
    plt = _pyplot()
    series = list(dataset)[:MAX_PANELS]
    fig, axes = plt.subplots(len(series), 1, figsize=(8, 1.8 * len(series)), sharex=False, squeeze=False)
    for ax, s in zip(axes[:, 0], series):
        ax.plot(s.values, lw=0.9, color="k")
        _shade_events(ax, s.events)
        ax.set_ylabel(s.id)
    axes[-1, 0].set_xlabel("index")
    fig.tight_layout()
    _save(fig, path)


def plot_components(series_id, x, events, d, path):
    """Observed series and its s, t, a, r factors, with flagged anomalies marked."""
    plt = _pyplot()
    fig, axes = plt.subplots(5, 1, figsize=(8, 7), sharex=True)
    idx = np.arange(len(x))
    axes[0].plot(idx, x, lw=0.9, color="k", label="x")
    axes[0].plot(idx, d.s * d.t - d.offset, lw=0.9, color="tab:blue", label="s*t")
    flagged = d.anomalies
    axes[0].scatter(flagged, np.asarray(x)[flagged], color="tab:red", s=14, zorder=3, label="anomaly")
    _shade_events(axes[0], events)
    axes[0].legend(loc="upper left", fontsize=7, ncol=3)
    axes[0].set_title(series_id)
    for ax, name, values in zip(axes[1:], "star", (d.s, d.t, d.a, d.r)):
        ax.plot(idx, values, lw=0.9)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("index")
    fig.tight_layout()
    _save(fig, path)


def plot_loss(trace, path):
    plt = _pyplot()
    trace = np.asarray(trace, dtype=float).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if len(trace):
        ax.plot(trace[:, 0], trace[:, 1], marker=".", label="train")
        ax.plot(trace[:, 0], trace[:, 2], marker=".", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_forecast(rows, observed: dict, path):
    """Mean forecast with the 5-95% band per series; ``observed`` maps id to (values, events)."""
    plt = _pyplot()
    ids = list(dict.fromkeys(r["series_id"] for r in rows))[:MAX_PANELS]
    if not ids:
        return
    fig, axes = plt.subplots(len(ids), 1, figsize=(8, 2.0 * len(ids)), squeeze=False)
    for ax, sid in zip(axes[:, 0], ids):
        sub = [r for r in rows if r["series_id"] == sid]
        t = np.array([r["t"] for r in sub])
        if sid in observed:
            values, events = observed[sid]
            lo = max(int(t.min()) - 3 * max(len(t) // 4, 1), 0)
            ax.plot(np.arange(lo, len(values)), values[lo:], color="k", lw=0.9, label="observed")
            _shade_events(ax, np.where(np.arange(len(events)) >= lo, events, 0))
        ax.fill_between(t, [r["q05"] for r in sub], [r["q95"] for r in sub], color="tab:blue", alpha=0.25,
                        lw=0, label="5-95%")
        ax.plot(t, [r["mean"] for r in sub], color="tab:blue", lw=1.0, label="mean")
        ax.set_ylabel(sid)
    axes[0, 0].legend(loc="upper left", fontsize=7, ncol=3)
    axes[-1, 0].set_xlabel("index")
    fig.tight_layout()
    _save(fig, path)


def plot_report(table, path):
    """Grouped bars of CRPS, RMSE and SD per method, overall and at critical steps."""
    plt = _pyplot()
    metrics = ("crps", "rmse", "sd")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    labels = [f"{r['method']} (tau={r['window']})" for r in table]
    width = 0.8 / max(len(table), 1)
    for ax, prefix, title in zip(axes, ("", "critical_"), ("all steps", "critical steps")):
        for k, (row, label) in enumerate(zip(table, labels)):
            vals = [row[prefix + m] for m in metrics]
            ax.bar(np.arange(len(metrics)) + k * width, vals, width, label=label)
        ax.set_xticks(np.arange(len(metrics)) + 0.4 - width / 2)
        ax.set_xticklabels([m.upper() for m in metrics])
        ax.set_title(title)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_dropout_choice(rows, path):
    """Histogram of the per-step selected dropout probability."""
    plt = _pyplot()
    p = np.array([r["p_star"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if p.size:
        grid = np.unique(p)
        counts = [(p == g).sum() for g in grid]
        ax.bar(grid, counts, width=0.06)
    ax.set_xlabel("selected dropout probability")
    ax.set_ylabel("steps")
    fig.tight_layout()
    _save(fig, path)
