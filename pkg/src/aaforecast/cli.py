"""Command-line entry point: synth, decompose, train, forecast, evaluate.

Every command writes into ``--out`` atomically: files go to a temporary
sibling directory that is renamed into place only when the command succeeds.
The fully resolved configuration is echoed as ``resolved.cfg``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ABLATIONS, ConfigError, RunConfig
from .metrics import EvalReport, evaluate, prepare_for, run_ablation
from .model import AAModel, train
from .scenarios import event_corpus, motif_corpus
from .series import CsvSchema, Dataset, ScenarioConfig, SeriesError, load_csv, synth_generate, write_csv
from .star import DecompositionConfig, decompose

log = logging.getLogger("aaforecast")

COMMANDS = ("synth", "decompose", "train", "forecast", "evaluate")


class CommandError(RuntimeError):
    pass


class _Step:
    """Name of the pipeline step in progress, reported when something fails."""

    def __init__(self):
        self.name = "start"

    def __call__(self, name):
        self.name = name
        log.info("%s", name)


@contextlib.contextmanager
def atomic_dir(out):
    """Yield a temporary directory that replaces ``out`` only on success."""
    out = Path(out).resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if out.exists():
        old = out.parent / f".{out.name}.old-{os.getpid()}"
        os.replace(out, old)
    os.replace(tmp, out)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", str(name)) or "series"


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _maybe_plot(cfg: RunConfig, fn, *args):
    if not cfg.plot:
        return
    from .plotting import PlottingUnavailable

    try:
        fn(*args)
    except PlottingUnavailable as exc:
        log.warning("skipping figures: %s", exc)


def _load_data(cfg: RunConfig) -> Dataset:
    if not cfg.data:
        raise CommandError("no input data: pass --data or set 'data' in the config")
    path = Path(cfg.data)
    if not path.exists():
        raise CommandError(f"data file not found: {path}")
    return load_csv(path, CsvSchema(cycle=cfg.cycle))


def _split_ids(ids, fraction, seed):
    """Seeded split of series ids into (train, held-out) for the zero-shot protocol."""
    ids = sorted(ids)
    if len(ids) < 2:
        raise CommandError("zero-shot protocol needs at least two series")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_test = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    test = sorted(ids[i] for i in perm[:n_test])
    return [i for i in ids if i not in set(test)], test


def _load_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise CommandError("no checkpoint given: pass --checkpoint (written by 'train')")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path}")
    model, hyper = AAModel.load(path)
    return model, hyper


def _decomp_from(hyper, cfg: RunConfig) -> DecompositionConfig:
    if "decomposition" in hyper:
        return DecompositionConfig(**hyper["decomposition"])
    return cfg.decomposition()


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path, step: _Step):
    sc = dict(cfg.scenario)
    kind = sc.pop("scenario", "single" if set(sc) - {"n_series"} else "events")
    n = int(sc.pop("n_series", 1 if kind == "single" else 16))
    step(f"generate {kind} scenario ({n} series)")
    if kind == "single":
        base = ScenarioConfig.from_mapping({"cycle": cfg.cycle, **sc})
        series = []
        for k in range(n):
            seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
            s = synth_generate(base, seed)
            if n > 1:
                s.id = f"{base.series_id}-{k:03d}"
            series.append(s)
        data = Dataset(series)
    elif kind in ("events", "motifs"):
        kw = {}
        if "T" in sc:
            kw["T"] = int(sc["T"])
        if "noise" in sc:
            kw["noise"] = float(sc["noise"])
        kw["cycle"] = cfg.cycle
        make = event_corpus if kind == "events" else motif_corpus
        data = make(n_series=n, seed=cfg.seed, **kw)
    else:
        raise CommandError(f"unknown scenario kind {kind!r} (single, events, motifs)")
    step("write series.csv")
    write_csv(out / "series.csv", data)
    from .plotting import plot_series

    _maybe_plot(cfg, plot_series, data, out / "series.png")
    return {"series": len(data), "points": int(sum(len(s) for s in data))}


def cmd_decompose(cfg: RunConfig, out: Path, step: _Step):
    data = _load_data(cfg)
    dcfg = cfg.decomposition()
    comp = out / "components"
    comp.mkdir()
    summary = []
    from .plotting import plot_components

    for s in data:
        step(f"decompose series {s.id}")
        d = decompose(s.values, s.events, s.cycle, dcfg)
        name = _safe(s.id)
        rows = zip(range(len(s)), s.values, s.events, d.s, d.t, d.a, d.r, d.rho)
        _write_rows(comp / f"{name}.csv", ["index", "x", "e", "s", "t", "a", "r", "rho"], rows)
        meta = {"series_id": s.id, **d.meta(), "anomalies": d.anomalies.tolist(), "config": dcfg.to_dict()}
        _write_json(comp / f"{name}.meta.json", meta)
        summary.append({"series_id": s.id, "n": len(s), "anomalies": int(len(d.anomalies)),
                        "rho_c": d.rho_c, "offset": d.offset})
        if len(summary) <= 6:
            _maybe_plot(cfg, plot_components, s.id, s.values, s.events, d, comp / f"{name}.png")
    _write_rows(out / "summary.csv", ["series_id", "n", "anomalies", "rho_c", "offset"],
                [list(r.values()) for r in summary])
    return {"series": len(summary)}


def cmd_train(cfg: RunConfig, out: Path, step: _Step):
    data = _load_data(cfg)
    mcfg, tcfg, dcfg = cfg.model_config(), cfg.train_config(), cfg.decomposition()
    if cfg.protocol == "zero-shot":
        train_ids, held_out = _split_ids(data.ids, cfg.test_fraction, cfg.seed)
    else:
        train_ids, held_out = data.ids, []
    split = "zero-shot" if cfg.protocol == "zero-shot" else "80-20"
    step(f"prepare {len(train_ids)} training series ({split})")
    preps = prepare_for(data.subset(train_ids), split, mcfg.channels, dcfg)
    model = AAModel(mcfg)
    step(f"train {mcfg.kind} model for {tcfg.epochs} epochs")
    result = train(model, preps, tcfg)
    step("write checkpoint")
    extra = {"train": asdict(tcfg), "decomposition": dcfg.to_dict(), "protocol": split,
             "train_ids": train_ids, "held_out_ids": held_out, "best_epoch": result.best_epoch}
    model.save(out / "checkpoint.json", extra)
    _write_rows(out / "loss_trace.csv", ["epoch", "train_loss", "val_loss"], result.trace_rows())
    from .plotting import plot_loss

    _maybe_plot(cfg, plot_loss, result.trace_rows(), out / "loss.png")
    return {"best_epoch": result.best_epoch, "windows_series": len(preps),
            "parameters": model.store.n_parameters()}


def _forecast_targets(cfg, model, hyper, data):
    """Test series and split name for the checkpoint's protocol."""
    split = hyper.get("protocol", "80-20")
    if split == "zero-shot":
        trained = set(hyper.get("train_ids", []))
        test_ids = [i for i in data.ids if i not in trained]
        if not test_ids:
            raise CommandError("every series in the data was used for training; nothing to forecast zero-shot")
        return data.subset(test_ids), split, sorted(trained)
    return data, split, []


def _static_p(cfg, model):
    return model.config.static_dropout if cfg.ablation == "no-uncertainty" else None


def _check_variant(cfg: RunConfig, model: AAModel):
    want_attention = cfg.ablation != "no-attention"
    want_channels = "raw" if cfg.ablation == "no-star" else "star"
    if model.config.use_attention != want_attention or model.config.channels != want_channels:
        raise CommandError(f"checkpoint was trained as a different variant (attention={model.config.use_attention}, "
                           f"channels={model.config.channels}); retrain with --ablation {cfg.ablation}")


def cmd_forecast(cfg: RunConfig, out: Path, step: _Step):
    step("load checkpoint")
    model, hyper = _load_checkpoint(cfg)
    _check_variant(cfg, model)
    data = _load_data(cfg)
    test, split, train_ids = _forecast_targets(cfg, model, hyper, data)
    report, prepared = _evaluate(cfg, model, hyper, test, split, train_ids, step)
    preps = {p.id: p for p in prepared}
    rows = []
    for r in report.steps:
        norm = preps[r.series_id].normalizer
        sc, loc = norm.scale, norm.loc
        rows.append({"series_id": r.series_id, "t": r.t + 1, "mean": r.mean * sc + loc, "sd": r.sd * sc,
                     "p_star": r.p_star, "q05": r.q05 * sc + loc, "q50": r.q50 * sc + loc, "q95": r.q95 * sc + loc})
    cols = ["series_id", "t", "mean", "sd", "p_star", "q05", "q50", "q95"]
    _write_rows(out / "forecast.csv", cols, [[row[c] for c in cols] for row in rows])
    from .plotting import plot_dropout_choice, plot_forecast

    observed = {s.id: (s.values, s.events) for s in test}
    _maybe_plot(cfg, plot_forecast, rows, observed, out / "forecast.png")
    _maybe_plot(cfg, plot_dropout_choice, rows, out / "p_star.png")
    return {"steps": len(rows), "series": len(preps)}


def _evaluate(cfg, model, hyper, test, split, train_ids, step):
    if cfg.tau != model.tau:
        log.info("using the checkpoint's tau=%d (config asked for %d)", model.tau, cfg.tau)
    dcfg = _decomp_from(hyper, cfg)
    step(f"prepare {len(test)} series")
    preps = prepare_for(test, split, model.config.channels, dcfg)
    step(f"forecast with {cfg.mc_samples} samples per grid point")
    report = evaluate(model, test, split, model.tau, grid=cfg.grid, n_samples=cfg.mc_samples, seed=cfg.seed,
                      decomp=dcfg, train_ids=train_ids, static_p=_static_p(cfg, model),
                      variant=_variant_name(cfg.ablation), prepared=preps,
                      config={"checkpoint": str(cfg.checkpoint), "ablation": cfg.ablation})
    return report, preps


def _variant_name(ablation):
    return "full" if ablation == "none" else ablation


def _table_row(method, report: EvalReport):
    agg, crit = report.aggregate, report.critical
    return {"method": method, "window": report.tau, "crps": agg["crps"], "rmse": agg["rmse"], "sd": agg["sd"],
            "n": agg["n"], "critical_crps": crit["crps"], "critical_rmse": crit["rmse"],
            "critical_sd": crit["sd"], "critical_n": crit["n"]}


TABLE_COLUMNS = ["method", "window", "crps", "rmse", "sd", "n", "critical_crps", "critical_rmse", "critical_sd",
                 "critical_n"]


def _write_report(out, reports: dict, cfg):
    table = [_table_row(name, rep) for name, rep in reports.items()]
    _write_rows(out / "table.csv", TABLE_COLUMNS, [[row[c] for c in TABLE_COLUMNS] for row in table])
    per_series = []
    for name, rep in reports.items():
        for sid, m in rep.per_series.items():
            per_series.append([name, rep.tau, sid, m["crps"], m["rmse"], m["sd"], m["n"]])
    _write_rows(out / "per_series.csv", ["method", "window", "series_id", "crps", "rmse", "sd", "n"], per_series)
    steps = []
    for name, rep in reports.items():
        for s in rep.steps:
            steps.append([name, s.series_id, s.t + 1, s.observed, s.mean, s.sd, s.p_star, s.crps,
                          int(s.critical)])
    _write_rows(out / "steps.csv", ["method", "series_id", "t", "observed", "mean", "sd", "p_star", "crps",
                                    "critical"], steps)
    _write_json(out / "report.json", {name: rep.to_dict() for name, rep in reports.items()})
    from .plotting import plot_report

    _maybe_plot(cfg, plot_report, table, out / "report.png")
    return table


def cmd_evaluate(cfg: RunConfig, out: Path, step: _Step):
    if cfg.protocol == "ablation":
        data = _load_data(cfg)
        step("train and score every ablation variant")
        base = replace(cfg, ablation="none")
        reports = run_ablation(data, data, "80-20", model_cfg=base.model_config(), train_cfg=cfg.train_config(),
                               decomp=cfg.decomposition(), grid=cfg.grid, n_samples=cfg.mc_samples,
                               seed=cfg.seed)
    else:
        step("load checkpoint")
        model, hyper = _load_checkpoint(cfg)
        _check_variant(cfg, model)
        data = _load_data(cfg)
        test, split, train_ids = _forecast_targets(cfg, model, hyper, data)
        report, _ = _evaluate(cfg, model, hyper, test, split, train_ids, step)
        reports = {_variant_name(cfg.ablation): report}
    step("write report")
    table = _write_report(out, reports, cfg)
    return {row["method"]: {"crps": row["crps"], "rmse": row["rmse"], "sd": row["sd"]} for row in table}


HANDLERS = {"synth": cmd_synth, "decompose": cmd_decompose, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (supports include = path)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (replaced atomically)")
    common.add_argument("--data", help="input CSV: series_id,timestamp,value,event_level")
    common.add_argument("--cycle", type=int, help="observations per seasonal period")
    common.add_argument("--tau", type=int, help="window length")
    common.add_argument("--grid", help="comma-separated dropout probabilities to search")
    common.add_argument("--mc-samples", type=int, dest="mc_samples", help="Monte-Carlo samples per grid point")
    common.add_argument("--ablation", choices=ABLATIONS)
    common.add_argument("--preset", help="training defaults: hurricane, covid19 or electricity")
    common.add_argument("--protocol", choices=("80-20", "zero-shot", "ablation"))
    common.add_argument("--checkpoint", help="model checkpoint written by 'train'")
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--lr", type=float)
    common.add_argument("--weight-decay", type=float, dest="weight_decay")
    common.add_argument("--epochs", type=int)
    common.add_argument("--static-dropout", type=float, dest="static_dropout")
    common.add_argument("--hidden", type=int)
    common.add_argument("--cell", choices=("gru", "lstm"))
    common.add_argument("--optimizer", choices=("sgd", "adam"))
    common.add_argument("--plot", dest="plot", action="store_true", default=None, help="render PNG figures")
    common.add_argument("--no-plot", dest="plot", action="store_false", help="skip PNG figures")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="aaforecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a seeded synthetic corpus",
        "decompose": "split each series into seasonal, trend, anomaly and residual factors",
        "train": "train the forecaster and write a checkpoint and loss trace",
        "forecast": "probabilistic one-step forecasts over the test segment",
        "evaluate": "CRPS / RMSE / SD report, optionally for every ablation variant",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg.update(overrides, Path.cwd())
    flags = {k: getattr(args, k) for k in ("seed", "out", "data", "cycle", "tau", "grid", "mc_samples", "ablation",
                                           "preset", "protocol", "checkpoint", "batch_size", "lr", "weight_decay",
                                           "epochs", "static_dropout", "hidden", "cell", "optimizer", "plot")}
    cfg.update({k: v for k, v in flags.items() if v is not None}, Path.cwd())
    return cfg.validate()


def run(command: str, cfg: RunConfig) -> dict:
    """Run one command; returns a small summary. Raises on any failure."""
    if command not in HANDLERS:
        raise CommandError(f"unknown command {command!r}")
    step = _Step()
    try:
        with atomic_dir(cfg.out) as tmp:
            (tmp / "resolved.cfg").write_text(f"# command = {command}\n" + cfg.dumps(), encoding="utf-8")
            summary = HANDLERS[command](cfg, tmp, step)
            _write_json(tmp / "summary.json", {"command": command, **summary})
    except Exception as exc:
        exc.step = step.name
        raise
    return summary


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"aaforecast {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run(args.command, cfg)
    except (CommandError, ConfigError, SeriesError, ValueError, FloatingPointError,
            OSError) as exc:
        module = type(exc).__module__.replace("aaforecast.", "")
        where = getattr(exc, "step", "?")
        print(f"aaforecast {args.command}: error during '{where}' [{module}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(Path(cfg.out).resolve()), **summary},
                     default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
