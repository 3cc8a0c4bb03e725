"""Resolved experiment configuration, persisted as TOML.

One section per configurable component; unknown keys are rejected so that
a typo in a config file fails loudly instead of silently using a default.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

import tomli_w

from .exceptions import ConfigurationError
from .nn import CnnConfig, TrainConfig
from .siggen import GenerationConfig, StftConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DataSection:
    per_class: int = 200
    img_h: int = 64
    img_w: int = 64
    gen_seed: int = 0
    test_fraction: float = 0.25
    split_seed: int = 0
    partition_mode: str = "iid"
    beta: float = 0.1
    num_clients: int = 10
    partition_seed: int = 0


@dataclass(frozen=True)
class FedSection:
    rounds: int = 400
    local_epochs: int = 1
    eval_every: int = 1
    checkpoint_every: int = 0


_SECTIONS = {
    "data": DataSection,
    "generation": GenerationConfig,
    "stft": StftConfig,
    "model": CnnConfig,
    "train": TrainConfig,
    "fed": FedSection,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: CnnConfig = field(default_factory=CnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fed: FedSection = field(default_factory=FedSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
        return cls().override(**{name: data.get(name, {}) for name in _SECTIONS})

    def override(self, **sections) -> "RunConfig":
        """Return a copy with ``section={key: value}`` updates applied; ``None`` values are skipped."""
        out = {}
        for name, updates in sections.items():
            if name not in _SECTIONS:
                raise ConfigurationError(f"unknown config section {name!r}")
            current = getattr(self, name)
            valid = {f.name: f for f in fields(current)}
            clean = {}
            for key, value in updates.items():
                if value is None:
                    continue
                if key not in valid:
                    raise ConfigurationError(f"unknown key {key!r} in section [{name}]")
                if isinstance(getattr(current, key), tuple):
                    value = tuple(value)
                clean[key] = value
            out[name] = replace(current, **clean)
        return replace(self, **out)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid config file: {exc}") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())
