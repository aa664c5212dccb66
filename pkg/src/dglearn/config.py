"""Experiment configuration files.

The format is the INI dialect read by :mod:`configparser`: ``[section]``
headers followed by ``key = value`` lines; ``#`` and ``;`` start comments.
Every key is optional and falls back to the documented default. The full
grammar and the list of keys live in ``docs/formats.md``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

MODES = ("sync", "sequential", "pipelined", "async", "async-quantized")
DATASETS = ("synthetic-gaussians", "synthetic-spirals", "cifar10-binary", "idx-images")
AUX_KINDS = ("cnn-aux", "mlp-aux", "mlp-sr-aux")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    mode: str = "sync"
    seed: int = 0
    eval_every: int = 0  # batches (sync drivers) or ticks (async); 0 selects the default
    dtype: str = "float32"


@dataclass
class DataSection:
    dataset: str = "synthetic-gaussians"
    classes: int = 4
    size: int = 8
    n: int = 2048
    n_test: int = 2048
    noise: float = 2.5
    batch_size: int = 128
    path: str = ""
    subset_n: int = 0
    data_seed: int = 1


@dataclass
class ModelSection:
    width: int = 16
    modules: int = 4
    aux: str = "mlp-aux"


@dataclass
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.2
    decay_period: int = 15
    epochs: int = 50


@dataclass
class DelaySection:
    slow_module: int = -1  # -1: no slow module
    slowdown: float = 1.0
    pmf: str = ""  # explicit comma-separated probabilities; overrides the two keys above


@dataclass
class BufferSection:
    capacity: int = 2  # batches
    capacity_samples: int = 0  # when positive, converted to batches (rounded up)


@dataclass
class QuantizerSection:
    atoms: int = 256
    groups: int = 32
    decay: float = 0.99
    alpha: float = 1.0
    period: int = 0  # when positive, sync every `period` writes instead of at rate alpha
    frozen_ema: bool = False
    dead_after: int = 1024  # unused vectors before an atom is re-seeded; 0 disables


SECTIONS = {
    "run": RunSection, "data": DataSection, "model": ModelSection, "optim": OptimSection,
    "delay": DelaySection, "buffer": BufferSection, "quantizer": QuantizerSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    delay: DelaySection = field(default_factory=DelaySection)
    buffer: BufferSection = field(default_factory=BufferSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)

    @classmethod
    def desk(cls, mode: str = "sync", seed: int = 0, **overrides) -> "ExperimentConfig":
        """Quick preset: 8x8 synthetic gratings, width 16, 4 modules, 10 epochs."""
        cfg = cls()
        cfg.run.mode = mode
        cfg.run.seed = seed
        cfg.data.batch_size = 64
        cfg.optim.epochs = 10
        cfg.optim.decay_period = 4
        cfg.quantizer.groups = 4
        # small batches make the 1024-vector rule fire on healthy rare atoms
        cfg.quantizer.dead_after = 0
        for key, value in overrides.items():
            section, _, name = key.partition("__")
            setattr(getattr(cfg, section), name, value)
        cfg.validate()
        return cfg

    def validate(self) -> "ExperimentConfig":
        r, d, m, o, q = self.run, self.data, self.model, self.optim, self.quantizer
        checks = [
            (r.mode in MODES, f"run.mode must be one of {MODES}, got {r.mode!r}"),
            (r.dtype in ("float32", "float64"), f"run.dtype must be float32 or float64"),
            (d.dataset in DATASETS, f"data.dataset must be one of {DATASETS}, got {d.dataset!r}"),
            (m.aux in AUX_KINDS, f"model.aux must be one of {AUX_KINDS}, got {m.aux!r}"),
            (m.width >= 1, "model.width must be >= 1"),
            (m.modules >= 1, "model.modules must be >= 1"),
            (d.batch_size >= 1, "data.batch_size must be >= 1"),
            (o.lr > 0, "optim.lr must be positive"),
            (0 < o.decay_factor <= 1, "optim.decay_factor must lie in (0, 1]"),
            (o.decay_period >= 1, "optim.decay_period must be >= 1"),
            (o.epochs >= 1, "optim.epochs must be >= 1"),
            (self.delay.slowdown > 0, "delay.slowdown must be positive"),
            (self.buffer.capacity >= 1, "buffer.capacity must be >= 1"),
            (q.atoms >= 1 and q.groups >= 1, "quantizer.atoms and quantizer.groups must be >= 1"),
            (0 < q.decay < 1, "quantizer.decay must lie in (0, 1)"),
            (0 <= q.alpha <= 1, "quantizer.alpha must lie in [0, 1]"),
            (q.dead_after >= 0, "quantizer.dead_after must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.delay.pmf:
            self.pmf()
        return self

    def pmf(self) -> list[float] | None:
        if not self.delay.pmf:
            return None
        try:
            values = [float(v) for v in self.delay.pmf.split(",")]
        except ValueError as exc:
            raise ConfigError(f"delay.pmf: {exc}") from None
        if len(values) != self.model.modules:
            raise ConfigError(f"delay.pmf has {len(values)} entries for {self.model.modules} modules")
        return values

    # -- serialization ---------------------------------------------------
    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path: "str | Path") -> Path:
        path = Path(path)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{name}]")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            values = {}
            for key, raw in parser[name].items():
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _parse(raw, type(getattr(section, key)), f"{source}: [{name}] {key}")
            setattr(cfg, name, replace(section, **values))
        return cfg.validate()

    @classmethod
    def load(cls, path: "str | Path") -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(), str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
