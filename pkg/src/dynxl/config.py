"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    data.dir = runs/prep
    model.d_model = 64
    train.steps = 2000
    tune.learning_rates = 1e-5, 1e-4

Lines starting with ``#`` are comments. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dyneval import DynevalConfig
from .errors import ConfigError
from .harness import DEFAULT_DECAY, DEFAULT_RMS_LR, TrainConfig, default_grid
from .model import ModelConfig


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _scalar(text: str, typ):
    if typ is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def parse_value(text: str, annotation):
    """Coerce ``text`` to the (possibly optional or tuple) type ``annotation``."""
    text = text.strip()
    args = typing.get_args(annotation)
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() == "none":
            return None
        return parse_value(text, inner[0])
    if origin is tuple:
        if not text:
            return ()
        return tuple(_scalar(p.strip(), args[0]) for p in text.split(","))
    return _scalar(text, annotation)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def dataclass_to_lines(obj, prefix: str = "") -> list[str]:
    return [f"{prefix}{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


_COMMENT = re.compile(r"(^|\s)#.*$")


def parse_lines(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment at line start or after whitespace."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(key, "given more than once")
        out[key] = value.strip()
    return out


def build_dataclass(cls, values: dict[str, str], prefix: str = ""):
    hints = _hints(cls)
    kwargs = {}
    for key, text in values.items():
        if key not in hints:
            raise ConfigError(prefix + key, "unknown key")
        try:
            kwargs[key] = parse_value(text, hints[key])
        except ValueError as exc:
            raise ConfigError(prefix + key, str(exc)) from None
    return cls(**kwargs)


@dataclass
class DataSection:
    input: str | None = None
    kind: str = "byte"
    fractions: tuple[float, ...] = (0.9, 0.05, 0.05)
    vocab_limit: int = 10000
    dir: str | None = None


@dataclass
class TuneSection:
    kinds: tuple[str, ...] = ("sgd", "rms_decay")
    learning_rates: tuple[float, ...] = DEFAULT_RMS_LR
    sgd_learning_rates: tuple[float, ...] | None = None
    decay_rates: tuple[float, ...] = DEFAULT_DECAY
    epsilon: float = 1e-5
    max_tokens: int | None = None
    workers: int = 1

    def grid(self) -> list[DynevalConfig]:
        out = []
        for kind in self.kinds:
            if kind == "sgd" and self.sgd_learning_rates is not None:
                out += [DynevalConfig("sgd", lr) for lr in self.sgd_learning_rates]
            else:
                out += default_grid((kind,), self.learning_rates, self.decay_rates, self.epsilon)
        return out


@dataclass
class StatsSection:
    max_segments: int | None = None


@dataclass
class OutSection:
    dir: str = "."


SECTIONS = {"data": DataSection, "model": ModelConfig, "train": TrainConfig,
            "dyneval": DynevalConfig, "tune": TuneSection, "stats": StatsSection, "out": OutSection}


@dataclass
class RunConfig:
    """Everything one experiment needs, one namespace per component."""

    raw: dict[str, str] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    @staticmethod
    def known_key(key: str) -> bool:
        section, _, name = key.partition(".")
        return section in SECTIONS and name in _hints(SECTIONS[section])

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "RunConfig":
        cfg = cls(base_dir=Path(base_dir) if base_dir else Path.cwd())
        cfg.update(parse_lines(text))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        return cls.from_text(text, path.parent)

    def update(self, values: dict[str, str]) -> None:
        for key in values:
            if not self.known_key(key):
                raise ConfigError(key, "unknown key")
        self.raw.update(values)

    def _values(self, section: str) -> dict[str, str]:
        pre = section + "."
        return {k[len(pre):]: v for k, v in self.raw.items() if k.startswith(pre)}

    def section(self, name: str, **defaults):
        values = {k: format_value(v) for k, v in defaults.items()}
        values.update(self._values(name))
        return build_dataclass(SECTIONS[name], values, name + ".")

    @property
    def data(self) -> DataSection:
        return self.section("data")

    @property
    def train(self) -> TrainConfig:
        return self.section("train")

    @property
    def dyneval(self) -> DynevalConfig:
        return self.section("dyneval")

    @property
    def tune(self) -> TuneSection:
        return self.section("tune")

    @property
    def stats(self) -> StatsSection:
        return self.section("stats")

    @property
    def out(self) -> OutSection:
        return self.section("out")

    def model(self, vocab_size: int, **extra) -> ModelConfig:
        return self.section("model", vocab_size=vocab_size, **extra)

    def path(self, key: str, must_exist: bool = True) -> Path:
        """Resolve a path-valued key relative to the config file's directory."""
        value = self.raw.get(key)
        if value is None:
            section, _, name = key.partition(".")
            value = getattr(self.section(section), name)
        if value is None:
            raise ConfigError(key, "is required")
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigError(key, f"path does not exist: {p}")
        return p

    def to_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))
