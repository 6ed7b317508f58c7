"""Run configuration: INI-style ``key = value`` sections, or JSON.

Sections map onto the dataclasses they configure::

    [model]     ModelConfig fields
    [schedule]  warmup_steps, peak_lr
    [task]      TaskSpec fields
    [train]     TrainOptions fields
    [run]       seed, data_seed, epochs, init_mode, profile_tokens, f64, out_dir
    [sweep]     cells (e.g. "8L-2L:admin, 2L-8L:admin"), seeds (e.g. "0, 1, 2")
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .architecture import ConfigurationError, ModelConfig
from .corpus import TaskSpec
from .training import Schedule, TrainOptions

INIT_MODES = ("default", "admin")


@dataclass
class RunSettings:
    seed: int = 0
    data_seed: int = 0
    epochs: int = 10
    init_mode: str = "default"
    profile_tokens: int = 1024
    per_feature_omega: bool = False
    f64: bool = False
    out_dir: str = "runs/default"


@dataclass
class SweepCell:
    n_enc: int
    n_dec: int
    init_mode: str

    @property
    def label(self) -> str:
        return f"{self.n_enc}L-{self.n_dec}L:{self.init_mode}"

    @classmethod
    def parse(cls, text: str) -> "SweepCell":
        m = re.fullmatch(r"\s*(\d+)L-(\d+)L(?::(\w+))?\s*", text)
        if not m:
            raise ConfigurationError(f"bad sweep cell {text!r}; expected e.g. '8L-2L:admin'")
        init = m.group(3) or "admin"
        if init not in INIT_MODES:
            raise ConfigurationError(f"bad init mode in sweep cell {text!r}")
        return cls(int(m.group(1)), int(m.group(2)), init)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainOptions = field(default_factory=TrainOptions)
    run: RunSettings = field(default_factory=RunSettings)
    sweep_cells: list = field(default_factory=list)
    sweep_seeds: list = field(default_factory=list)

    def validate(self) -> "RunConfig":
        if self.run.init_mode not in INIT_MODES:
            raise ConfigurationError(f"init_mode must be one of {INIT_MODES}")
        if self.run.init_mode == "admin":
            if self.model.block_mode not in ("postln", "admin"):
                raise ConfigurationError("admin initialisation applies to post-LN blocks only")
            self.model.block_mode = "admin"
        elif self.model.block_mode == "admin":
            raise ConfigurationError("block_mode=admin needs init_mode=admin")
        if self.model.src_vocab != self.task.vocab_size or self.model.tgt_vocab != self.task.vocab_size:
            self.model.src_vocab = self.model.tgt_vocab = self.task.vocab_size
        if self.model.max_len < self.task.max_len + 2:
            raise ConfigurationError("model max_len must cover the longest sentence plus specials")
        if self.run.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.train.accum_steps < 1:
            raise ConfigurationError("accum_steps must be >= 1")
        if not self.train.batch_tokens > 0:
            raise ConfigurationError("batch_tokens must be positive")
        try:
            self.schedule.__post_init__()
        except ValueError as e:
            raise ConfigurationError(str(e)) from None
        self.model.validate()
        self.task.validate()
        return self

    def with_cell(self, cell: SweepCell, seed: int, out_dir: str) -> "RunConfig":
        other = RunConfig.from_dict(self.to_dict())
        other.model.n_enc_layers, other.model.n_dec_layers = cell.n_enc, cell.n_dec
        other.model.block_mode = "admin" if cell.init_mode == "admin" else "postln"
        other.run.init_mode = cell.init_mode
        other.run.seed = seed
        other.run.out_dir = out_dir
        other.sweep_cells, other.sweep_seeds = [], []
        return other.validate()

    # serialisation

    def sections(self) -> dict:
        return {"model": self.model, "schedule": self.schedule, "task": self.task,
                "train": self.train, "run": self.run}

    def to_dict(self) -> dict:
        d = {k: dataclasses.asdict(v) for k, v in self.sections().items()}
        if self.sweep_cells:
            d["sweep"] = {"cells": [c.label for c in self.sweep_cells], "seeds": list(self.sweep_seeds)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for name, obj in cfg.sections().items():
            for key, value in (d.get(name) or {}).items():
                _set_field(obj, name, key, value)
        sweep = d.get("sweep") or {}
        cells = sweep.get("cells", [])
        if isinstance(cells, str):
            cells = [c for c in cells.split(",") if c.strip()]
        cfg.sweep_cells = [SweepCell.parse(c) for c in cells]
        seeds = sweep.get("seeds", [])
        if isinstance(seeds, str):
            seeds = [s for s in seeds.split(",") if s.strip()]
        cfg.sweep_seeds = [int(s) for s in seeds]
        return cfg

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, values in self.to_dict().items():
            cp[section] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        else:
            path.write_text(self.to_ini())


def _fmt(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(tp, raw, where):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "")):
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)]
        tp = inner[0] if inner else float
    try:
        if tp is bool:
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if tp is float:
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where}: cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _set_field(obj, section, key, value):
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigurationError(f"unknown key [{section}] {key}")
    setattr(obj, key, _coerce(hints[key], value, f"[{section}] {key}"))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    else:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigurationError(f"{path}: {e}") from None
        data = {s: dict(cp[s]) for s in cp.sections()}
    unknown = set(data) - {"model", "schedule", "task", "train", "run", "sweep"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig.from_dict(data).validate()


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``acceptance.ini``)."""
    return Path(__file__).parent / "configs" / name
