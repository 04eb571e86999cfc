"""Run configuration: JSON files validated against ``config.schema.json``."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .demos import DatasetConfig
from .hrl import HrlHyper, OnlineConfig
from .models import ModelConfig
from .offline import OfflineConfig


class ConfigError(ValueError):
    """Malformed configuration; ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class ScenesConfig:
    n_scenes: int = 200
    obstacles_range: tuple = (3, 7)
    seed: int = 1


@dataclass
class EvalConfig:
    n_scenes: int = 200
    obstacles_range: tuple = (3, 7)
    seed: int = 12345
    selection: str = "critic"
    fixed_switch: Optional[int] = None
    workers: int = 1


@dataclass
class AblationConfig:
    variants: tuple = ("bc", "zeros", "single-plan", "no-policy-loss", "hcg")
    seeds: tuple = (0, 1, 2)
    n_scenes: int = 200
    obstacles_range: tuple = (3, 7)
    clutter_levels: tuple = (3, 4, 5, 6, 7)
    clutter_scenes: int = 200
    selection: str = "mode"
    fixed_switch: Optional[int] = 30
    eval_seed: int = 777


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    hrl: HrlHyper = field(default_factory=HrlHyper)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())


SECTIONS = {
    "scenes": ScenesConfig,
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "offline": OfflineConfig,
    "online": OnlineConfig,
    "hrl": HrlHyper,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def config_hash(d: dict) -> str:
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


def _locate(text: str, path) -> Optional[int]:
    """Best-effort line number of the key at ``path`` in the JSON source."""
    pos = 0
    line = None
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if not m:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in names:  # the schema should already have caught this
            raise ConfigError("unknown key", field=k)
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno) from e
    validator = jsonschema.Draft7Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            known = set(err.schema.get("properties", {}))
            extra = sorted(set(err.instance) - known)
            path = path + extra[:1]
            msg = f"unknown key '{extra[0]}'" if extra else err.message
        else:
            msg = err.message
        raise ConfigError(msg, line=_locate(text, path), field=".".join(str(p) for p in path) or None)
    cfg = RunConfig()
    try:
        for k, v in data.items():
            if k in SECTIONS:
                setattr(cfg, k, _build(SECTIONS[k], v))
            else:
                setattr(cfg, k, v)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    if "points" in data.get("model", {}) and cfg.model.points != cfg.dataset.points:
        raise ConfigError("model.points must equal dataset.points", line=_locate(text, ["model", "points"]),
                          field="model.points")
    cfg.model.points = cfg.dataset.points
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
