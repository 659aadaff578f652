"""Flat ``key = value`` experiment configs.

Blank lines and ``#`` comments are ignored. Keys map onto
:class:`TrainConfig`, :class:`SynthConfig` (prefixed names where they
would collide) and a handful of harness settings. A config names at most one
data source: either ``data_dir`` or synthetic generator keys; with neither,
the default synthetic generator is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .synthetic import SynthConfig
from .training import METHODS, TrainConfig


class ConfigError(ValueError):
    pass


# config key -> TrainConfig field
TRAIN_KEYS = {f.name: f.name for f in fields(TrainConfig)}
TRAIN_KEYS.update({"N": "epochs", "N_w": "warmup", "lambda": "lam"})
# config key -> SynthConfig field
SYNTH_KEYS = {f.name: f.name for f in fields(SynthConfig) if f.name != "seed"}
SYNTH_KEYS["synth_seed"] = "seed"
HARNESS_KEYS = {
    "data_dir", "out", "count", "split", "eval_seeds", "methods", "eval_split",
    "checkpoint", "score_every", "alpha_grid", "beta_grid", "reference",
}


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(default, text):
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    data_dir: Path | None = None
    out: Path = Path("runs/default")
    count: int = 100
    split: tuple = (0.6, 0.2, 0.2)
    eval_seeds: tuple = (0,)
    methods: tuple = ("none", "adacs")
    eval_split: str = "test"
    checkpoint: Path | None = None
    score_every: int = 25
    alpha_grid: tuple = (0.0, 0.01, 0.05, 0.1)
    beta_grid: tuple = (0.0, 0.05, 0.1)
    reference: str = "auto"

    def __post_init__(self):
        if (self.synth is None) == (self.data_dir is None):
            raise ConfigError("exactly one data source is required: synthetic settings or data_dir")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {', '.join(bad)}; valid methods: {', '.join(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"duplicate entries in methods: {','.join(self.methods)}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"eval_split must be train, val or test, got {self.eval_split!r}")
        if self.score_every < 1:
            raise ConfigError("score_every must be >= 1")
        if not self.eval_seeds:
            raise ConfigError("eval_seeds must be nonempty")
        if self.reference != "auto" and self.reference not in METHODS:
            raise ConfigError(f"reference must be 'auto' or a method, got {self.reference!r}")

    def with_overrides(self, out=None, seed=None, methods=None):
        cfg = self
        if out is not None:
            cfg = replace(cfg, out=Path(out))
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)), eval_seeds=(int(seed),))
        if methods is not None:
            cfg = replace(cfg, methods=_names(methods) if isinstance(methods, str) else tuple(methods))
        return cfg


def parse_lines(text, source="<config>"):
    """``{key: (value, line number)}``; duplicate keys and missing ``=`` are errors."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {entries[key][1]})")
        entries[key] = (value, lineno)
    return entries


def build_config(entries, source="<config>", base_dir=None):
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    train, synth, harness = {}, {}, {}
    train_defaults, synth_defaults = TrainConfig(), SynthConfig()
    lines = {}
    for key, (value, lineno) in entries.items():
        lines[key] = lineno
        try:
            if key in TRAIN_KEYS:
                name = TRAIN_KEYS[key]
                train[name] = _coerce(getattr(train_defaults, name), value)
            elif key in SYNTH_KEYS:
                name = SYNTH_KEYS[key]
                synth[name] = _coerce(getattr(synth_defaults, name), value)
            elif key in HARNESS_KEYS:
                harness[key] = value
            else:
                raise ConfigError(f"unknown key {key!r}")
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None

    def at(key):
        return f"{source}:{lines[key]}" if key in lines else source

    kwargs = {}
    try:
        kwargs["train"] = TrainConfig(**train)
    except ValueError as exc:
        bad = next((k for k in ("method", "warmup", "epochs", "N", "N_w") if k in lines), None)
        raise ConfigError(f"{at(bad) if bad else source}: {exc}") from None
    if "data_dir" in harness:
        if synth:
            first = min(lines[k] for k in entries if k in SYNTH_KEYS)
            raise ConfigError(f"{source}:{first}: data_dir and synthetic settings are mutually exclusive")
        path = Path(harness["data_dir"])
        kwargs["data_dir"] = path if path.is_absolute() else base_dir / path
        kwargs["synth"] = None
    else:
        try:
            kwargs["synth"] = SynthConfig(**synth)
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    for key, conv in (("count", int), ("split", _floats), ("eval_seeds", _ints),
                      ("methods", _names), ("score_every", int), ("alpha_grid", _floats),
                      ("beta_grid", _floats), ("eval_split", str), ("reference", str)):
        if key in harness:
            try:
                kwargs[key] = conv(harness[key])
            except ValueError as exc:
                raise ConfigError(f"{at(key)}: {exc}") from None
    for key in ("out", "checkpoint"):
        if key in harness:
            path = Path(harness[key])
            kwargs[key] = path if path.is_absolute() else base_dir / path
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build_config(parse_lines(text, str(path)), str(path), base_dir=path.parent)


def dump_config(cfg):
    """Render ``cfg`` as ``key = value`` text that :func:`load_config` reads back; paths are made absolute."""
    lines = ["# resolved experiment config"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(cfg.train, f.name)}")
    if cfg.data_dir is not None:
        lines.append(f"data_dir = {Path(cfg.data_dir).resolve()}")
    else:
        for key, name in SYNTH_KEYS.items():
            lines.append(f"{key} = {getattr(cfg.synth, name)}")
    lines += [
        f"out = {Path(cfg.out).resolve()}",
        f"count = {cfg.count}",
        f"split = {','.join(map(str, cfg.split))}",
        f"eval_seeds = {','.join(map(str, cfg.eval_seeds))}",
        f"methods = {','.join(cfg.methods)}",
        f"eval_split = {cfg.eval_split}",
        f"score_every = {cfg.score_every}",
        f"alpha_grid = {','.join(map(str, cfg.alpha_grid))}",
        f"beta_grid = {','.join(map(str, cfg.beta_grid))}",
        f"reference = {cfg.reference}",
    ]
    if cfg.checkpoint is not None:
        lines.append(f"checkpoint = {Path(cfg.checkpoint).resolve()}")
    return "\n".join(lines) + "\n"
