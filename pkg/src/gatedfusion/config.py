"""Flat ``section.key = value`` run configuration.

Sections ``model``, ``train`` and ``decode`` mirror :class:`ModelConfig`,
:class:`TrainConfig` and :class:`DecodeConfig`; ``data`` names the corpus
and ``run`` holds the master seed and output directory. Unknown keys are
errors so typos never pass silently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .generator import DecodeConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    corpus: str = ""
    mode: str = "paired-tsv"
    prefix_fraction: float = 0.5
    vocab: str = ""  # empty: build from the corpus
    min_freq: int = 1
    max_vocab: int = 50_000


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "run"


# seeds come from run.seed, vocab_size from the vocabulary
_DERIVED = {("model", "seed"), ("model", "vocab_size"), ("train", "seed"), ("decode", "seed")}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=1))
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    def resolved(self, vocab_size: int | None = None) -> "RunConfig":
        """Push the master seed (and vocabulary size) into every section."""
        seed = self.run.seed
        model = replace(self.model, seed=seed)
        if vocab_size is not None:
            model = replace(model, vocab_size=vocab_size)
        return replace(self, model=model, train=replace(self.train, seed=seed), decode=replace(self.decode, seed=seed))

    def validate(self) -> "RunConfig":
        self.train.validate()
        self.decode.validate()
        replace(self.model, vocab_size=max(self.model.vocab_size, 1)).validate()
        if self.data.mode not in ("paired-tsv", "auto-split"):
            raise ConfigError(f"data.mode must be paired-tsv or auto-split, got {self.data.mode!r}")
        if not 0.0 < self.data.prefix_fraction < 1.0:
            raise ConfigError("data.prefix_fraction must lie in (0, 1)")
        if self.data.max_vocab < 5:
            raise ConfigError("data.max_vocab must be >= 5")
        if self.run.seed < 0:
            raise ConfigError("run.seed must be non-negative")
        return self

    def to_text(self) -> str:
        lines = []
        for section in fields(self):
            for key, value in asdict(getattr(self, section.name)).items():
                # derived values are recorded but stay loadable as a config file
                prefix = "# " if (section.name, key) in _DERIVED else ""
                lines.append(f"{prefix}{section.name}.{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(raw: str, kind: str, key: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def apply_overrides(config: RunConfig, items) -> RunConfig:
    """Apply ``(dotted key, raw string)`` pairs on top of ``config``."""
    sections = {f.name: getattr(config, f.name) for f in fields(config)}
    for key, raw in items:
        section, _, name = key.partition(".")
        if section not in sections:
            raise ConfigError(f"unknown config key {key!r}")
        types = {f.name: f.type for f in fields(sections[section])}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if (section, name) in _DERIVED:
            raise ConfigError(f"{key} is derived; set run.seed instead" if name == "seed" else f"{key} is derived from the vocabulary")
        sections[section] = replace(sections[section], **{name: _coerce(raw.strip(), types[name], key)})
    return RunConfig(**sections)


def parse_lines(text: str, source: str = "<config>"):
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        items.append((key.strip(), value.strip()))
    return items


def load_run_config(path=None, overrides=()) -> RunConfig:
    config = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        config = apply_overrides(config, parse_lines(text, str(path)))
    return apply_overrides(config, overrides)


def parse_override(item: str):
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    return key.strip(), value
