"""Run configuration: every tunable in one object, addressed by flat dotted keys.

A config file is a JSON object whose keys are ``section.field`` (for
example ``"train.batch_size": 32``); nested objects ``{"train": {...}}`` are
accepted and flattened.  Precedence, lowest to highest: built-in defaults,
config file, ``--set key=value`` overrides, dedicated command-line flags.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping

from .backbone import BackboneConfig
from .data import SynthSpec
from .episodes import EpisodeSpec
from .errors import InvalidConfigError
from .lrl import LrlConfig
from .trainer import TrainConfig


@dataclass
class SplitSpec:
    base_frac: float = 0.625
    val_frac: float = 0.125
    seed: int = 0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    episodes: EpisodeSpec = field(default_factory=EpisodeSpec)
    lrl: LrlConfig = field(default_factory=LrlConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    split: SplitSpec = field(default_factory=SplitSpec)

    @classmethod
    def sections(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def flat(self) -> Dict[str, Any]:
        """All settings as ``{"section.field": json-compatible value}``."""
        out = {}
        for section in self.sections():
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = _jsonable(getattr(obj, f.name))
        return out

    def set(self, key: str, value: Any) -> None:
        section, _, name = key.partition(".")
        if section not in self.sections() or not name:
            raise InvalidConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        types = {f.name: str(f.type) for f in dataclasses.fields(obj)}
        if name not in types:
            raise InvalidConfigError(f"unknown config key {key!r}")
        if value is None and "Optional" in types[name]:
            coerced = None
        else:
            coerced = _coerce(key, getattr(obj, name), value)
        setattr(self, section, dataclasses.replace(obj, **{name: coerced}))

    def update(self, mapping: Mapping[str, Any]) -> "RunConfig":
        for key, value in flatten(mapping).items():
            self.set(key, value)
        return self

    def config_hash(self) -> str:
        blob = json.dumps(self.flat(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        self.train.validate()
        self.lrl.validate()
        self.synth.validate()


def flatten(mapping: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten one level of section nesting into dotted keys."""
    out = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping) and not prefix:
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _tupleize(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupleize(v) for v in value)
    return value


def _coerce(key: str, current, value):
    """Coerce ``value`` to the type of the field's current value."""
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.lower()
                if lowered not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return lowered in ("true", "1")
            if not isinstance(value, (bool, int)):
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(current, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        return _tupleize(value)
    except (TypeError, ValueError):
        raise InvalidConfigError(
            f"{key}: cannot use {value!r} where a {type(current).__name__} is expected") from None


def parse_assignment(text: str):
    """``"train.epochs=3"`` -> ``("train.epochs", 3)``; non-JSON values stay strings."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise InvalidConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            mapping = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(mapping, dict):
            raise InvalidConfigError(f"{path}: top level must be a JSON object")
        cfg.update(mapping)
    for text in overrides:
        cfg.set(*parse_assignment(text))
    return cfg
