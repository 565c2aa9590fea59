"""Flat ``key = value`` run configuration with includes.

A config file holds one ``key = value`` pair per line. ``#`` starts a
comment. ``include = other.cfg`` pulls in another file (resolved relative to
the including file); keys set later win, so an include placed first acts as a
base that the rest of the file overrides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import DATASET_PRESETS, DEFAULT_PRESET, ModelConfig, TrainConfig
from .series import ScenarioConfig
from .star import DecompositionConfig
from .uncertainty import DEFAULT_GRID, DEFAULT_SAMPLES

DEFAULT_TAUS = (3, 6, 12, 24)
ABLATIONS = ("none", "no-star", "no-uncertainty", "no-attention")
SCENARIO_KEYS = (set(ScenarioConfig.KEYS) - {"cycle"}) | {"scenario", "n_series"}


class ConfigError(ValueError):
    pass


def parse_config(path, _seen=None) -> dict:
    """Read a config file into an ordered ``{key: raw string}`` mapping."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    seen.add(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key == "include":
            out.update(parse_config(path.parent / value, seen))
            continue
        out[key] = value
    seen.discard(path)
    return out


def _tuple_of(conv):
    def parse(raw):
        if isinstance(raw, (list, tuple)):
            return tuple(conv(v) for v in raw)
        return tuple(conv(v) for v in str(raw).replace(";", ",").split(",") if v.strip())
    return parse


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _opt_float(raw):
    if raw is None or str(raw).strip().lower() in ("", "none"):
        return None
    return float(raw)


def _opt_str(raw):
    if raw is None or str(raw).strip().lower() in ("", "none"):
        return None
    return str(raw)


@dataclass
class RunConfig:
    """Everything a CLI command needs, with dataset-preset training defaults."""

    data: str | None = None
    cycle: int = 12
    tau: int = 12
    allowed_tau: tuple = DEFAULT_TAUS
    # decomposition
    span: float = 0.3
    p: float = 0.05
    robust_iterations: int = 0
    refine_iterations: int = 10
    # model and training
    preset: str = DEFAULT_PRESET
    cell: str = "gru"
    hidden: int = 16
    batch_size: int | None = None
    lr: float | None = None
    weight_decay: float | None = None
    epochs: int | None = None
    static_dropout: float | None = None
    optimizer: str = "sgd"
    clip: float = 5.0
    val_fraction: float = 0.1
    # inference and evaluation
    grid: tuple = DEFAULT_GRID
    mc_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    protocol: str = "80-20"
    ablation: str = "none"
    test_fraction: float = 0.2
    checkpoint: str | None = None
    out: str = "out"
    plot: bool = True
    scenario: dict = field(default_factory=dict)

    _CONVERT = {
        "data": _opt_str, "checkpoint": _opt_str, "out": str, "preset": str, "cell": str,
        "optimizer": str, "protocol": str, "ablation": str,
        "cycle": int, "tau": int, "robust_iterations": int, "refine_iterations": int, "hidden": int,
        "mc_samples": int, "seed": int,
        "batch_size": lambda v: None if _opt_float(v) is None else int(v),
        "epochs": lambda v: None if _opt_float(v) is None else int(v),
        "span": float, "p": float, "clip": float, "val_fraction": float, "test_fraction": float,
        "lr": _opt_float, "weight_decay": _opt_float, "static_dropout": _opt_float,
        "allowed_tau": _tuple_of(int), "grid": _tuple_of(float), "plot": _bool,
    }

    @classmethod
    def from_mapping(cls, kv: dict, base_dir=None) -> "RunConfig":
        cfg = cls()
        cfg.update(kv, base_dir)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_config(path), Path(path).resolve().parent)

    def update(self, kv: dict, base_dir=None) -> "RunConfig":
        for key, raw in kv.items():
            if raw is None:
                continue
            if key in SCENARIO_KEYS:
                self.scenario[key] = raw
                continue
            conv = self._CONVERT.get(key)
            if conv is None:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
            if key in ("data", "checkpoint") and value is not None and base_dir is not None:
                value = str((Path(base_dir) / value).resolve()) if not Path(value).is_absolute() else value
            setattr(self, key, value)
        return self

    def validate(self) -> "RunConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.tau in self.allowed_tau, f"tau={self.tau} not in allowed set {list(self.allowed_tau)}")
        need(self.cycle >= 1, f"cycle must be positive, got {self.cycle}")
        need(0 < self.span <= 1, f"span must be in (0, 1], got {self.span}")
        need(0 < self.p < 1, f"p must be in (0, 1), got {self.p}")
        need(self.preset in DATASET_PRESETS, f"unknown preset {self.preset!r}; choose from {sorted(DATASET_PRESETS)}")
        need(self.cell in ("gru", "lstm"), f"cell must be gru or lstm, got {self.cell!r}")
        need(self.hidden >= 1, "hidden size must be positive")
        need(self.optimizer in ("sgd", "adam"), f"optimizer must be sgd or adam, got {self.optimizer!r}")
        need(self.grid and all(0 < q < 1 for q in self.grid), f"grid values must lie in (0, 1): {list(self.grid)}")
        need(self.mc_samples >= 2, "mc_samples must be at least 2")
        need(self.protocol in ("80-20", "zero-shot", "ablation"), f"unknown protocol {self.protocol!r}")
        need(self.ablation in ABLATIONS, f"ablation must be one of {list(ABLATIONS)}")
        need(0 < self.test_fraction < 1, "test_fraction must be in (0, 1)")
        t = self.train_config()
        need(t.batch_size >= 1 and t.epochs >= 0 and t.lr >= 0 and t.weight_decay >= 0,
             "training hyperparameters must be non-negative (batch >= 1)")
        need(0 <= self.static_p() < 1, f"static dropout must be in [0, 1), got {self.static_p()}")
        for name in ("span", "p", "clip", "val_fraction"):
            need(math.isfinite(getattr(self, name)), f"{name} must be finite")
        return self

    def static_p(self) -> float:
        if self.static_dropout is not None:
            return self.static_dropout
        return DATASET_PRESETS[self.preset]["static_dropout"]

    def decomposition(self) -> DecompositionConfig:
        return DecompositionConfig(span=self.span, p=self.p, robust_iterations=self.robust_iterations,
                                   refine_iterations=self.refine_iterations)

    def train_config(self) -> TrainConfig:
        overrides = {k: getattr(self, k) for k in ("batch_size", "lr", "weight_decay", "epochs")
                     if getattr(self, k) is not None}
        return TrainConfig.preset(self.preset, seed=self.seed, optimizer=self.optimizer, clip=self.clip,
                                  val_fraction=self.val_fraction, **overrides)

    def model_config(self) -> ModelConfig:
        changes = {}
        if self.ablation == "no-attention":
            changes["use_attention"] = False
        elif self.ablation == "no-star":
            changes["channels"] = "raw"
        return ModelConfig(kind=self.cell, hidden=self.hidden, tau=self.tau, static_dropout=self.static_p(),
                           seed=self.seed, **changes)

    def resolved(self) -> dict:
        """Every setting after includes, overrides and preset defaults."""
        out = {}
        for f in fields(self):
            if f.name.startswith("_") or f.name == "scenario":
                continue
            out[f.name] = getattr(self, f.name)
        t = self.train_config()
        out.update(batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay, epochs=t.epochs,
                   static_dropout=self.static_p())
        for k, v in self.scenario.items():
            out[k] = v
        return out

    def dumps(self) -> str:
        lines = []
        for k, v in self.resolved().items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"
