"""Training and evaluation of the gated encoder on a synthetic task."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import tensor as T
from ..encoder import ConfigError, Encoder, ModelConfig
from ..flops import FlopsReport, model_flops
from ..regularizers import LossBreakdown, RegularizerInputs, polar_and_total
from .data import Dataset, SyntheticTask, generate_synthetic
from .optim import Adam, NonFiniteGradient

log = logging.getLogger(__name__)

POLE_TOLERANCE = 0.05


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, checkpoint: dict | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_model: float = 1e-3
    lr_mask: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gated: bool = True
    log_every: int = 0  # steps between metric rows; 0 logs once per epoch
    attn_group: int = 8
    dtype: str = "float64"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs: must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if self.lr_model <= 0 or self.lr_mask <= 0:
            raise ConfigError("lr_model/lr_mask: must be positive")
        if self.log_every < 0:
            raise ConfigError("log_every: must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype: expected float32 or float64")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    step: int
    epoch: int
    losses: dict[str, float]
    accuracy: float
    kept_fraction: list[float]
    polarization_fraction: float


@dataclass
class TrainMetrics:
    rows: list[MetricsRow] = field(default_factory=list)
    histograms: list[tuple[int, list[list]]] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_csv(self, layers: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "task_loss", "l_filter", "bi_modal", "polar", "total", "accuracy"]
                   + [f"kept_frac_block_{l}" for l in range(2, layers + 1)] + ["polarization_fraction"])
        for r in self.rows:
            L = r.losses
            w.writerow([r.step, r.epoch] + [repr(L[k]) for k in ("task", "l_filter", "bi_modal", "polar", "total")]
                       + [repr(r.accuracy)] + [repr(k) for k in r.kept_fraction] + [repr(r.polarization_fraction)])
        return buf.getvalue()


@dataclass
class EvalResult:
    accuracy: float
    mean_active_counts: list[float]
    flops: FlopsReport

    @property
    def kept_fraction(self) -> list[float]:
        n = self.flops.seq_len
        return [c / n for c in self.mean_active_counts[1:]]


def polarization_fraction(model: Encoder, tol: float = POLE_TOLERANCE) -> float:
    v = model.gate_values()
    return float(np.mean((v <= tol) | (v >= 1.0 - tol)))


def compute_loss(model: Encoder, tokens: np.ndarray, labels: np.ndarray, gated: bool = True,
                 group: int = 8) -> tuple[LossBreakdown, T.Tensor, list[int]]:
    c = model.config
    out = model.forward(tokens, gated=gated, group=group)
    task = T.cross_entropy(out.logits, labels)
    if gated:
        reg = RegularizerInputs(masks=[g.m for g in model.gates], seq_len=c.seq_len, gamma=c.gamma,
                                lambda_filter=c.lambda_filter, lambda_bi=c.lambda_bi,
                                filter_target_mode=c.filter_target_mode)
        breakdown = polar_and_total(task, reg)
    else:
        zero = T.Tensor(np.zeros((), dtype=task.dtype))
        breakdown = LossBreakdown(task=task, l_filter=zero, bi_modal=zero, polar=zero, total=task)
    return breakdown, out.logits, out.active_counts


def evaluate(model: Encoder, data: Dataset, gated: bool = True, batch_size: int = 256,
             group: int = 8) -> EvalResult:
    c = model.config
    correct = 0
    count_sum = np.zeros(c.layers)
    for lo in range(0, len(data), batch_size):
        toks = data.tokens[lo:lo + batch_size]
        out = model.forward(toks, gated=gated, group=group, trace=True)
        pred = out.logits.data.argmax(axis=1)
        correct += int((pred == data.labels[lo:lo + batch_size]).sum())
        count_sum += np.array([s.counts.sum() for s in out.active_sets], dtype=float)
    mean_counts = (count_sum / len(data)).tolist()
    report = model_flops([int(round(x)) for x in mean_counts], c.seq_len, c.hidden)
    return EvalResult(correct / len(data), mean_counts, report)


def mask_histogram(model: Encoder, bins: int = 10) -> list[list]:
    """Rows (block, bin_lo, bin_hi, count) of gate values over uniform bins of [0, 1]."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for l, values in enumerate(model.gate_values(), start=2):
        counts, _ = np.histogram(values, bins=edges)
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            rows.append([l, float(lo), float(hi), int(n)])
    return rows


def histogram_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "bin_lo", "bin_hi", "count"])
    for block, lo, hi, n in rows:
        w.writerow([block, repr(lo), repr(hi), n])
    return buf.getvalue()


def export_mask_histogram(model: Encoder, bins: int = 10) -> str:
    return histogram_csv(mask_histogram(model, bins))


def _snapshot(model: Encoder) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def train(config: ModelConfig, task: SyntheticTask, train_cfg: TrainConfig | None = None,
          data: tuple[Dataset, Dataset] | None = None, progress=None) -> tuple[Encoder, TrainMetrics]:
    """Minibatch training of task loss plus gate regularizers; returns the model and its metric series.

    Model weights and gate vectors are stepped by two separate Adam instances.
    """
    train_cfg = (train_cfg or TrainConfig()).validate()
    config.validate()
    task.validate()
    if task.seq_len != config.seq_len or task.vocab != config.vocab or task.classes != config.classes:
        raise ConfigError("task: seq_len/vocab/classes must match the model config")
    train_set, eval_set = data if data is not None else generate_synthetic(task)

    model = Encoder(config, dtype=np.dtype(train_cfg.dtype))
    weights_opt = Adam(model.named_weights(), lr=train_cfg.lr_model, beta1=train_cfg.beta1,
                       beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    gates_opt = Adam(model.named_gates(), lr=train_cfg.lr_mask, beta1=train_cfg.beta1,
                     beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    gated = train_cfg.gated
    shuffler = np.random.default_rng(config.seed + 1)
    metrics = TrainMetrics()
    n = len(train_set)
    steps_per_epoch = -(-n // train_cfg.batch_size)
    log_every = train_cfg.log_every or steps_per_epoch
    last_good = _snapshot(model)

    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffler.permutation(n)
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            model.zero_grad()
            breakdown, _, _ = compute_loss(model, train_set.tokens[idx], train_set.labels[idx],
                                           gated=gated, group=train_cfg.attn_group)
            if not np.isfinite(breakdown.total.data):
                raise DivergenceError(f"non-finite loss at step {step + 1}", step + 1, last_good)
            breakdown.total.backward()
            try:
                weights_opt.step()
                if gated:
                    gates_opt.step()
            except NonFiniteGradient as exc:
                raise DivergenceError(str(exc), step + 1, last_good) from exc
            step += 1
            last_good = _snapshot(model) if step % steps_per_epoch == 0 else last_good

            if step % log_every == 0 or step == steps_per_epoch * train_cfg.epochs:
                ev = evaluate(model, eval_set, gated=gated, group=train_cfg.attn_group)
                row = MetricsRow(step, epoch, breakdown.scalars(), ev.accuracy, ev.kept_fraction,
                                 polarization_fraction(model))
                metrics.rows.append(row)
                metrics.histograms.append((step, mask_histogram(model)))
                log.info("step %d epoch %d loss %.4f acc %.4f kept %s polar %.3f", step, epoch,
                         row.losses["total"], row.accuracy, np.round(row.kept_fraction, 3),
                         row.polarization_fraction)
                if progress is not None:
                    progress(row)
    return model, metrics
