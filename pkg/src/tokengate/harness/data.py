"""Planted-signal classification task standing in for a real benchmark.

Each sequence starts with a fixed CLS id. A number of signal tokens is
planted at random non-CLS positions; every other position is noise drawn
uniformly from the remaining ids. The label is the signal count modulo the
number of classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np


@dataclass
class SyntheticTask:
    vocab: int = 32
    seq_len: int = 16
    classes: int = 2
    signal_ids: tuple[int, ...] = (1,)
    max_signal: int | None = None
    n_train: int = 2048
    n_eval: int = 1024
    cls_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.signal_ids = tuple(int(i) for i in self.signal_ids)
        if self.max_signal is None:
            self.max_signal = self.classes - 1

    def validate(self) -> "SyntheticTask":
        from ..encoder import ConfigError

        ids = set(self.signal_ids)
        if not ids:
            raise ConfigError("signal_ids: need at least one signal id")
        if self.cls_id in ids:
            raise ConfigError("signal_ids: must not contain the CLS id")
        if any(not 0 <= i < self.vocab for i in ids) or not 0 <= self.cls_id < self.vocab:
            raise ConfigError(f"signal_ids/cls_id: ids must lie in [0, {self.vocab})")
        if self.vocab - len(ids) - 1 < 1:
            raise ConfigError("vocab: no ids left for noise tokens")
        if self.classes < 2:
            raise ConfigError("classes: need at least 2")
        if self.max_signal < self.classes - 1:
            raise ConfigError("max_signal: must allow every label (>= classes - 1)")
        if self.max_signal > self.seq_len - 1:
            raise ConfigError("max_signal: more signal tokens than non-CLS positions")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train/n_eval: must be positive")
        return self

    @property
    def noise_ids(self) -> np.ndarray:
        banned = set(self.signal_ids) | {self.cls_id}
        return np.array([i for i in range(self.vocab) if i not in banned], dtype=np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal_ids"] = list(self.signal_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        from ..encoder import ConfigError

        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    tokens: np.ndarray  # [N, I] int64
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)


def _generate(task: SyntheticTask, n: int, rng: np.random.Generator) -> Dataset:
    labels = rng.permutation(np.arange(n) % task.classes)
    # counts congruent to the label, up to max_signal
    wraps = (task.max_signal - labels) // task.classes + 1
    counts = labels + task.classes * np.floor(rng.uniform(size=n) * wraps).astype(np.int64)
    noise = task.noise_ids
    signal = np.asarray(task.signal_ids, dtype=np.int64)
    tokens = noise[rng.integers(0, noise.size, size=(n, task.seq_len))]
    tokens[:, 0] = task.cls_id
    for i in range(n):
        if counts[i]:
            pos = 1 + rng.choice(task.seq_len - 1, size=counts[i], replace=False)
            tokens[i, pos] = signal[rng.integers(0, signal.size, size=counts[i])]
    return Dataset(tokens, labels.astype(np.int64))


def label_tokens(task: SyntheticTask, tokens: np.ndarray) -> np.ndarray:
    """Recompute labels from token ids: signal count (CLS excluded) modulo classes."""
    tokens = np.atleast_2d(tokens)
    counts = np.isin(tokens[:, 1:], task.signal_ids).sum(axis=1)
    return (counts % task.classes).astype(np.int64)


def generate_synthetic(task: SyntheticTask) -> tuple[Dataset, Dataset]:
    """Deterministic (train, eval) split for ``task.seed``."""
    task.validate()
    rng = np.random.default_rng(task.seed)
    train = _generate(task, task.n_train, rng)
    evalset = _generate(task, task.n_eval, rng)
    return train, evalset
