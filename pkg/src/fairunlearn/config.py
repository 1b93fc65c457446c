"""Run configuration: a flat ``section.key = value`` file with JSON values.

Example::

    # comments start with '#'
    data.interactions = "data/interactions.tsv"
    model.reg = 0.01
    eval.ks = [5, 20]

Unquoted values that are not valid JSON are taken as plain strings, so
``bias.kind = popularity`` works.  ``write_resolved`` echoes every key with
its effective value; feeding that file back through ``load_config``
reproduces the run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

OUTPUT_ENV = "FAIRUNLEARN_OUTPUT_DIR"


@dataclass(frozen=True)
class DataSection:
    interactions: str = ""
    groups: str = ""
    item_emb: str = ""
    checkpoint: str = ""
    periods: int = 10
    train_periods: int = 8
    valid_periods: int = 1
    test_periods: int = 1


@dataclass(frozen=True)
class ModelSection:
    dim: int = 8
    reg: float = 1e-3
    max_history: int = 10


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 2000
    lr: float = 1.0
    seed: int = 0
    tol: float = 1e-6


@dataclass(frozen=True)
class BiasSection:
    kind: str = "popularity"
    alpha: float = 0.5
    count_mode: str = "targets"
    value_mode: str = "log"


@dataclass(frozen=True)
class MaskSection:
    fair: float = 1.0
    acc: float = 1.0
    spa: float = 1.0
    lr: float = 1e-3
    iterations: int = 500
    candidate_ratio: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class CGSection:
    damping: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class EvalSection:
    ks: tuple = (5, 20)
    tau: float = 5.0
    fair_pop: str = "apt"
    fair_attr: str = "1-dp"
    exclude_history: bool = False


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    bias: BiasSection = field(default_factory=BiasSection)
    mask: MaskSection = field(default_factory=MaskSection)
    cg: CGSection = field(default_factory=CGSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self, require_files=True):
        ks = list(self.eval.ks)
        if not ks:
            raise ValueError("eval.ks must not be empty")
        if any(int(k) != k or k < 1 for k in ks) or ks != sorted(set(ks)):
            raise ValueError("eval.ks must be strictly ascending positive integers")
        if self.eval.tau <= 0:
            raise ValueError("eval.tau must be positive")
        if self.train.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.train.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if self.model.reg < 0:
            raise ValueError("model.reg must be >= 0")
        if require_files:
            if not self.data.interactions:
                raise ValueError("data.interactions is required")
            for key in ("interactions", "groups", "item_emb", "checkpoint"):
                path = getattr(self.data, key)
                if path and not Path(path).is_file():
                    raise FileNotFoundError(f"data.{key}: no such file {path!r}")
        return self


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def config_keys():
    """Every dotted key with its default value, in file order."""
    out = []
    for name, factory in SECTIONS.items():
        for f in fields(factory):
            out.append((f"{name}.{f.name}", getattr(factory(), f.name)))
    return out


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{key} expects true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{key} expects an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key} expects a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key} expects a list")
        return tuple(int(v) for v in value)
    if not isinstance(value, str):
        raise ValueError(f"{key} expects a string")
    return value


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides (values already parsed)."""
    defaults = dict(config_keys())
    grouped = {}
    for key, value in overrides.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        grouped.setdefault(section, {})[name] = _coerce(key, value, defaults[key])
    return replace(cfg, **{s: replace(getattr(cfg, s), **kv) for s, kv in grouped.items()})


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = parse_value(value)
    return values


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Defaults, then the file, then the output-dir environment variable, then overrides."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path:
        cfg = with_overrides(cfg, read_config_file(path))
    if env.get(OUTPUT_ENV):
        cfg = with_overrides(cfg, {"output.dir": env[OUTPUT_ENV]})
    if overrides:
        cfg = with_overrides(cfg, overrides)
    return cfg


def resolved_lines(cfg: RunConfig):
    for key, _ in config_keys():
        section, name = key.split(".", 1)
        value = getattr(getattr(cfg, section), name)
        if isinstance(value, tuple):
            value = list(value)
        yield f"{key} = {json.dumps(value)}"


def write_resolved(cfg: RunConfig, path):
    Path(path).write_text("\n".join(resolved_lines(cfg)) + "\n", encoding="utf-8")
