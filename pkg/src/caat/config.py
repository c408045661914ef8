"""Experiment configuration: one object for a whole run, stored as flat text.

The text format is one ``section.field=value`` per line with ``#`` comments,
for example::

    model.dim=32
    attack.budget=8/255
    train.epochs=30

A JSON document with one object per section is accepted as well.  Numbers may
be written as fractions (``8/255``); serialization always writes the exact
float ``repr`` so a parse/serialize/parse cycle is the identity.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .attacks import AttackConfig
from .errors import ArtifactError, ConfigError, UsageError
from .train import TrainConfig
from .vit import ViTConfig

DATA_SOURCES = ("synthetic", "cifar10")
_ATTACK_NAME = re.compile(r"^(pgd|cw)-([1-9][0-9]*)$")
VALID_ATTACKS = "fgsm, pgd-<steps>, cw-<steps> (e.g. pgd-10, cw-20)"


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str = ""  # CIFAR-10 binary directory
    classes: int = 2
    per_class: int = 128
    test_per_class: int = 100
    separation: float = 0.5
    noise: float = 0.1
    seed: int = 0
    train_limit: int = 0  # 0 keeps every sample
    test_limit: int = 0

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ConfigError("data.path is required when data.source=cifar10")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ConfigError("data limits must be >= 0")


@dataclass(frozen=True)
class CriticalityConfig:
    sample_count: int = 800
    batch_size: int = 32
    # attack overrides; None inherits the experiment attack
    budget: float | None = None
    step_size: float | None = None
    steps: int | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError(f"criticality.sample_count must be >= 1, got {self.sample_count}")
        if self.batch_size < 1:
            raise ConfigError(f"criticality.batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EvalConfig:
    attacks: tuple = ("pgd-10", "cw-20")
    batch_size: int = 64

    def __post_init__(self):
        for name in self.attacks:
            check_attack_name(name)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(random_init=True))
    train: TrainConfig = field(default_factory=TrainConfig)
    criticality: CriticalityConfig = field(default_factory=CriticalityConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = ""
    seed: int = 0

    def model_config(self) -> ViTConfig:
        return replace(self.model, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, attack=self.attack, seed=self.seed)

    def criticality_attack(self) -> AttackConfig:
        """Attack for the criticality corpus: deterministic start, optional overrides."""
        c = self.criticality
        budget = self.attack.budget if c.budget is None else c.budget
        step = self.attack.step_size if c.step_size is None else c.step_size
        steps = self.attack.steps if c.steps is None else c.steps
        return replace(self.attack, budget=budget, step_size=min(step, budget) if budget else step,
                       steps=steps, random_init=False)

    def eval_attacks(self, names=None):
        names = self.eval.attacks if names is None else names
        return {name: parse_attack(name, self.attack) for name in names}

    def with_overrides(self, seed=None, out=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        out = {}
        for name, cls in _SECTIONS.items():
            section = getattr(self, name)
            out[name] = {f.name: _plain(getattr(section, f.name))
                         for f in fields(cls) if (name, f.name) not in _DERIVED}
        out["out"] = self.out
        out["seed"] = self.seed
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        lines = []
        for key, value in _flatten(self.to_dict()):
            lines.append(f"{key}={_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(_SECTIONS) - {"out", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section = dict(data.get(name, {}))
            allowed = {f.name: f for f in fields(section_cls) if (name, f.name) not in _DERIVED}
            bad = set(section) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(f'{name}.{k}' for k in bad)}")
            typed = {k: _coerce(f"{name}.{k}", v, _field_type(section_cls, k))
                     for k, v in section.items()}
            try:
                kwargs[name] = section_cls(**typed)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        kwargs["out"] = str(data.get("out", ""))
        kwargs["seed"] = _coerce("seed", data.get("seed", 0), "int")
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        data = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            parts = key.split(".")
            if len(parts) == 1:
                target = data
            elif len(parts) == 2:
                target = data.setdefault(parts[0], {})
                if not isinstance(target, dict):
                    raise ConfigError(f"line {lineno}: {parts[0]!r} is not a section")
            else:
                raise ConfigError(f"line {lineno}: key {key!r} nests deeper than section.field")
            if parts[-1] in target:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            target[parts[-1]] = value
        return cls.from_dict(data)


_SECTIONS = {
    "model": ViTConfig,
    "data": DataConfig,
    "attack": AttackConfig,
    "train": TrainConfig,
    "criticality": CriticalityConfig,
    "eval": EvalConfig,
}
# fields filled in from elsewhere in the experiment rather than written out
_DERIVED = {("model", "seed"), ("train", "seed"), ("train", "attack")}


def _field_type(cls, name):
    for f in fields(cls):
        if f.name == name:
            return f.type if isinstance(f.type, str) else f.type.__name__
    raise ConfigError(f"unknown field {name}")


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _flatten(data, prefix=""):
    for key in sorted(data, key=lambda k: (isinstance(data[k], dict), k)):
        value = data[key]
        if isinstance(value, dict):
            yield from _flatten(value, f"{prefix}{key}.")
        else:
            yield f"{prefix}{key}", value


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _number(key, text):
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _coerce(key, value, kind):
    """Convert text (or JSON scalars) to the field's declared type."""
    optional = "None" in kind
    if isinstance(value, str):
        text = value.strip()
        if optional and text.lower() in ("none", "null", ""):
            return None
    else:
        text = None
        if value is None:
            if optional:
                return None
            raise ConfigError(f"{key}: value is required")
    if kind.startswith("bool"):
        if text is None:
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    if kind.startswith("int"):
        number = _number(key, text) if text is not None else value
        if isinstance(number, bool) or float(number) != int(number):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(number)
    if kind.startswith("float"):
        if text is not None:
            return _number(key, text)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind.startswith("tuple"):
        if text is not None:
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return tuple(value)
    return text if text is not None else str(value)


def check_attack_name(name):
    if name != "fgsm" and not _ATTACK_NAME.match(name):
        raise UsageError(f"unknown attack {name!r}; valid names: {VALID_ATTACKS}")


def parse_attack(name, base: AttackConfig) -> AttackConfig:
    """Evaluation attack ``name`` at the budget and step size of ``base``."""
    check_attack_name(name)
    if name == "fgsm":
        return replace(base, steps=1, step_size=base.budget or base.step_size,
                       random_init=False, loss_kind="ce")
    kind, steps = _ATTACK_NAME.match(name).groups()
    return replace(base, steps=int(steps), random_init=False, loss_kind="ce" if kind == "pgd" else "cw")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return ExperimentConfig.from_dict(data)
    return ExperimentConfig.from_text(text)


def save_config(cfg: ExperimentConfig, path):
    path = Path(path)
    path.write_text(cfg.to_json() if path.suffix == ".json" else cfg.to_text())
