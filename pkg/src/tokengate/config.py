"""Run configuration: model + synthetic task + training settings, JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import ConfigError, ModelConfig
from .harness.data import SyntheticTask
from .harness.train import TrainConfig

# task fields owned by the model section
_SHARED = ("vocab", "seq_len", "classes")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "RunConfig":
        for name in _SHARED:
            setattr(self.task, name, getattr(self.model, name))
        return self

    def validate(self) -> "RunConfig":
        self.sync()
        self.model.validate()
        self.task.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        task = self.task.to_dict()
        for name in _SHARED:
            task.pop(name)
        return {"model": self.model.to_dict(), "task": task, "train": self.train.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(d) - {"model", "task", "train"}
        if unknown:
            raise ConfigError(f"config: unknown section(s) {sorted(unknown)}")
        task = dict(d.get("task", {}))
        clash = [k for k in _SHARED if k in task]
        if clash:
            raise ConfigError(f"task.{clash[0]}: set it in the model section instead")
        try:
            cfg = cls(model=ModelConfig.from_dict(dict(d.get("model", {}))),
                      task=SyntheticTask.from_dict(task),
                      train=TrainConfig.from_dict(dict(d.get("train", {}))))
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply flat dotted-key overrides such as ``{"model.gamma": 0.3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in d or not name:
                raise ConfigError(f"{key}: expected <model|task|train>.<field>")
            if section == "task" and name in _SHARED:
                raise ConfigError(f"{key}: set model.{name} instead")
            if name not in d[section]:
                raise ConfigError(f"{key}: unknown field")
            d[section][name] = value
        return RunConfig.from_dict(d)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r}: expected key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
