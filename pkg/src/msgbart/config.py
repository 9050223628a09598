"""Run configuration: one JSON document covering data, model, training and decoding.

Loading is strict: unknown keys and wrongly typed values are rejected with
a list of every problem found, before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .data import WorldConfig
from .lm import LMConfig
from .model import PENALTY_STYLES, ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class TrainConfig:
    lr_lm: float = 1e-3
    lr_gvp: float = 3e-3
    weight_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 100
    batch_size: int = 32
    steps: int = 5000
    log_every: int = 50
    eval_every: int = 250
    seed: int = 0


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 6
    penalty: float = 0.6
    penalty_style: str = "plain"
    max_len: int = 6


@dataclass
class SplitConfig:
    ratios: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SCALARS = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _hints(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


def _unwrap(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _build(cls, data: Any, path: str, problems: List[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
        return None
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(data) - names):
        problems.append(f"{path}{key}: unknown key")
    kwargs = {}
    for name in sorted(names & set(data)):
        value = _check(hints[name], data[name], f"{path}{name}", problems)
        if value is not _BAD:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or '<root>'}: {exc}")
        return None


_BAD = object()


def _check(tp, value, path: str, problems: List[str]):
    tp, optional = _unwrap(tp)
    if value is None and optional:
        return None
    if dataclasses.is_dataclass(tp):
        built = _build(tp, value, path + ".", problems)
        return _BAD if built is None else built
    origin = typing.get_origin(tp)
    if origin in (list, List):
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
            return _BAD
        items = [_check(item, v, f"{path}[{i}]", problems) for i, v in enumerate(value)]
        return _BAD if any(i is _BAD for i in items) else items
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (bool, str) and isinstance(value, tp):
        return value
    problems.append(f"{path}: expected {_SCALARS.get(tp, tp)}, got {type(value).__name__}")
    return _BAD


def config_from_dict(data: dict) -> RunConfig:
    problems: List[str] = []
    cfg = _build(RunConfig, data, "", problems)
    if cfg is not None:
        if cfg.decode.strategy not in ("greedy", "beam"):
            problems.append(f"decode.strategy: must be 'greedy' or 'beam', got {cfg.decode.strategy!r}")
        if cfg.decode.penalty_style not in PENALTY_STYLES:
            problems.append(f"decode.penalty_style: must be one of {PENALTY_STYLES}")
        if cfg.decode.beam_size < 1:
            problems.append("decode.beam_size: must be >= 1")
        if cfg.train.batch_size < 1 or cfg.train.steps < 0:
            problems.append("train: batch_size must be >= 1 and steps >= 0")
        if cfg.model.feature_dim != cfg.world.feature_dim:
            problems.append(f"model.feature_dim ({cfg.model.feature_dim}) != world.feature_dim ({cfg.world.feature_dim})")
        try:
            cfg.world.validate()
        except ValueError as exc:
            problems.append(f"world: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: line {exc.lineno}: {exc.msg}"]) from exc
    return config_from_dict(data)


def _schema_for(tp) -> dict:
    tp, optional = _unwrap(tp)
    if dataclasses.is_dataclass(tp):
        hints = _hints(tp)
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(hints[f.name]) for f in dataclasses.fields(tp)},
        }
    if typing.get_origin(tp) in (list, List):
        (item,) = typing.get_args(tp)
        out = {"type": "array", "items": _schema_for(item)}
    else:
        out = {"type": _SCALARS[tp]}
    if optional:
        out = {"anyOf": [out, {"type": "null"}]}
    return out


def config_schema() -> dict:
    schema = _schema_for(RunConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "msgbart run configuration"
    return schema
