"""Run configuration: TOML/JSON file -> validated, fully resolved settings.

The schema is generated from the config dataclasses; unknown keys are
rejected. The config hash covers everything that changes results (not paths
or step budgets) and is stable under key reordering.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .agb import MODES, AGBConfig
from .critic import CriticConfig
from .data import DatasetManifest
from .dcinet import DCIConfig
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_PATH = Path(__file__).with_name("run_config.schema.json")

TRAIN_DEFAULTS = {
    "mode": "cwgan-agb",
    "fixed_weight": 100.0,
    "max_steps": None,
    "checkpoint_every": 0,
    "augment": True,
    "validate": True,
    "record_wall_time": False,
}
METRICS_DEFAULTS = {"extractor": "desk"}
PATHS_DEFAULTS = {"dataset": "dataset.h5", "run_dir": "run"}

# keys that do not influence results and are left out of the hash
UNHASHED = {
    ("train", "max_steps"),
    ("train", "checkpoint_every"),
    ("train", "record_wall_time"),
    ("agb", "max_epochs"),
}


class SchemaViolation(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _json_type(tp) -> dict:
    name = tp if isinstance(tp, str) else getattr(tp, "__name__", str(tp))
    if "bool" in name:
        return {"type": "boolean"}
    if "int" in name and "float" not in name:
        return {"type": "integer"}
    if "float" in name:
        return {"type": "number"}
    return {"type": "string"}


def _section(cls, skip=()) -> dict:
    props = {f.name: _json_type(f.type) for f in dataclasses.fields(cls) if f.name not in skip}
    return {"type": "object", "properties": props, "additionalProperties": False}


def build_schema() -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "agbrecon run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "data": _section(DatasetManifest, skip=("format_version",)),
            "generator": _section(DCIConfig),
            "critic": _section(CriticConfig, skip=("clip_value",)),
            "agb": _section(AGBConfig),
            "train": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "mode": {"enum": list(MODES)},
                    "fixed_weight": {"type": "number", "exclusiveMinimum": 0},
                    "max_steps": {"type": ["integer", "null"], "minimum": 0},
                    "checkpoint_every": {"type": "integer", "minimum": 0},
                    "augment": {"type": "boolean"},
                    "validate": {"type": "boolean"},
                    "record_wall_time": {"type": "boolean"},
                },
            },
            "metrics": {
                "type": "object",
                "additionalProperties": False,
                "properties": {"extractor": {"enum": ["desk", "pretrained"]}},
            },
            "paths": {
                "type": "object",
                "additionalProperties": False,
                "properties": {"dataset": {"type": "string"}, "run_dir": {"type": "string"}},
            },
        },
    }


def _defaults() -> dict:
    def fields(cls, skip=()):
        return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}

    return {
        "data": fields(DatasetManifest, skip=("format_version",)),
        "generator": fields(DCIConfig),
        "critic": fields(CriticConfig, skip=("clip_value",)),
        "agb": fields(AGBConfig),
        "train": dict(TRAIN_DEFAULTS),
        "metrics": dict(METRICS_DEFAULTS),
        "paths": dict(PATHS_DEFAULTS),
    }


def validate(raw: dict) -> None:
    """Raise :class:`SchemaViolation` naming the first failing key."""
    validator = jsonschema.Draft202012Validator(build_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    err = errors[0]
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        known = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - known)
        path = ".".join(filter(None, [path, extra[0] if extra else ""]))
        raise SchemaViolation(path, "unknown key")
    raise SchemaViolation(path or "<root>", err.message)


@dataclass
class RunConfig:
    raw: dict  # fully resolved nested dict
    base_dir: Path

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(**self.raw["data"])

    @property
    def generator(self) -> DCIConfig:
        return DCIConfig(**self.raw["generator"])

    @property
    def critic(self) -> CriticConfig:
        return CriticConfig(**self.raw["critic"], clip_value=self.raw["agb"]["clip"])

    @property
    def agb(self) -> AGBConfig:
        return AGBConfig(**self.raw["agb"])

    @property
    def mode(self) -> str:
        return self.raw["train"]["mode"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def extractor(self) -> str:
        return self.raw["metrics"]["extractor"]

    def path(self, key: str) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def override(self, section: str, key: str, value) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw[section][key] = value
        validate(raw)
        return RunConfig(raw, self.base_dir)

    def config_hash(self) -> str:
        hashed = {
            sec: {k: v for k, v in vals.items() if (sec, k) not in UNHASHED}
            for sec, vals in self.raw.items()
            if sec != "paths"
        }
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def frozen(self) -> dict:
        """Resolved config with absolute paths, suitable for re-running."""
        raw = copy.deepcopy(self.raw)
        raw["paths"] = {k: str(self.path(k)) for k in raw["paths"]}
        return raw

    def write_frozen(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.frozen(), indent=2, sort_keys=True) + "\n")
        return path

    def check(self) -> "RunConfig":
        """Instantiate every section so value errors surface before any work starts."""
        for section in ("manifest", "generator", "critic", "agb"):
            getattr(self, section)
        return self


def resolve(raw: dict, base_dir=".") -> RunConfig:
    validate(raw)
    merged = _defaults()
    for section, values in raw.items():
        merged[section].update(values)
    validate(merged)
    return RunConfig(merged, Path(base_dir).resolve())


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        raw = tomllib.loads(text.decode())
    return resolve(raw, path.parent)


def write_schema(path=SCHEMA_PATH) -> Path:
    Path(path).write_text(json.dumps(build_schema(), indent=2) + "\n")
    return Path(path)
