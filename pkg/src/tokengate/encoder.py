"""Post-LN transformer encoder with token gates in front of blocks 2..L.

Sequences in a batch are stacked row-wise into one ``[B * I, J]`` matrix.
Attention is computed on groups of sequences with a block-diagonal logit
mask, so tokens never attend across sequences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .gate import GateParams, Routing, mask_match
from .tensor import Tensor

ATTENTION_MODES = ("additive_mask", "literal")
FILTER_TARGET_MODES = ("per_block", "paper_literal")


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""


@dataclass
class ModelConfig:
    layers: int = 4
    seq_len: int = 16
    hidden: int = 32
    heads: int = 2
    ffn_dim: int | None = None
    vocab: int = 32
    classes: int = 2
    alpha: float = 0.5
    gamma: float = 0.5
    lambda_filter: float = 0.01
    lambda_bi: float = 2.0
    filter_target_mode: str = "per_block"
    attention_exclusion: str = "additive_mask"
    init_std: float = 0.02
    ln_eps: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden

    def validate(self) -> "ModelConfig":
        if self.layers < 2:
            raise ConfigError("layers: need at least 2 blocks (block 1 is ungated)")
        for name in ("seq_len", "hidden", "heads", "ffn_dim", "vocab", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.seq_len < 2:
            raise ConfigError("seq_len: need the CLS slot plus at least one token")
        if self.hidden % self.heads:
            raise ConfigError(f"heads: hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha: must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma: must lie in [0, 1], got {self.gamma}")
        if self.lambda_filter < 0 or self.lambda_bi < 0:
            raise ConfigError("lambda_filter/lambda_bi: must be non-negative")
        if self.filter_target_mode not in FILTER_TARGET_MODES:
            raise ConfigError(f"filter_target_mode: expected one of {FILTER_TARGET_MODES}")
        if self.attention_exclusion not in ATTENTION_MODES:
            raise ConfigError(f"attention_exclusion: expected one of {ATTENTION_MODES}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps: must be positive")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class BlockParams:
    wq: list[Tensor]
    bq: list[Tensor]
    wk: list[Tensor]
    bk: list[Tensor]
    wv: list[Tensor]
    bv: list[Tensor]
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                for h, t in enumerate(value):
                    yield f"{f.name}.{h}", t
            else:
                yield f.name, value


@dataclass
class ActiveSet:
    """Row flags for stacked sequences: True means the row enters the block live."""

    keep: np.ndarray
    seq_len: int

    @classmethod
    def full(cls, batch: int, seq_len: int) -> "ActiveSet":
        return cls(np.ones(batch * seq_len, dtype=bool), seq_len)

    @property
    def counts(self) -> np.ndarray:
        return self.keep.reshape(-1, self.seq_len).sum(axis=1)

    @property
    def count(self) -> int:
        """Active rows of the first sequence (all sequences share the count)."""
        return int(self.counts[0])

    @property
    def all_active(self) -> bool:
        return bool(self.keep.all())


@dataclass
class ForwardResult:
    logits: Tensor
    active_counts: list[int]
    active_sets: list[ActiveSet] = field(default_factory=list)
    block_inputs: list[Tensor] = field(default_factory=list)
    routings: list[Routing] = field(default_factory=list)


# ---------------------------------------------------------------------------
# sub-layers
# ---------------------------------------------------------------------------

def embed(tokens, tok_table: Tensor, pos_table: Tensor) -> Tensor:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    batch, n = tokens.shape
    vocab = tok_table.shape[0]
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= vocab:
        raise ValueError(f"token id out of range for vocab size {vocab}")
    positions = np.tile(np.arange(n), batch)
    return T.add(T.take(tok_table, tokens.reshape(-1)), T.take(pos_table, positions))


def _logit_mask(active: ActiveSet, lo: int, hi: int, mode: str) -> np.ndarray:
    n = active.seq_len
    seq_id = np.arange(lo, hi) // n
    allowed = seq_id[:, None] == seq_id[None, :]
    if mode == "additive_mask":
        allowed &= active.keep[lo:hi][None, :]
    return np.where(allowed, 0.0, -np.inf)


def multi_head_attention(x: Tensor, p: BlockParams, active: ActiveSet, mode: str = "additive_mask",
                         group: int = 8, weights_out: list | None = None) -> Tensor:
    rows = x.shape[0]
    n = active.seq_len
    step = max(1, group) * n
    head_dim = p.wq[0].shape[1]
    scale = 1.0 / math.sqrt(head_dim)
    masks = [(lo, min(rows, lo + step), _logit_mask(active, lo, min(rows, lo + step), mode))
             for lo in range(0, rows, step)]

    heads = []
    for h in range(len(p.wq)):
        q = T.add(T.matmul(x, p.wq[h]), p.bq[h])
        k = T.add(T.matmul(x, p.wk[h]), p.bk[h])
        v = T.add(T.matmul(x, p.wv[h]), p.bv[h])
        parts = []
        for lo, hi, mask in masks:
            if lo == 0 and hi == rows:
                qg, kg, vg = q, k, v
            else:
                qg, kg, vg = T.slice_rows(q, lo, hi), T.slice_rows(k, lo, hi), T.slice_rows(v, lo, hi)
            logits = T.add(T.mul(T.matmul(qg, T.transpose(kg)), scale), mask)
            attn = T.row_softmax(logits)
            if weights_out is not None:
                weights_out.append(attn.data)
            parts.append(T.matmul(attn, vg))
        heads.append(parts[0] if len(parts) == 1 else T.concat_rows(parts))

    context = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    out = T.add(T.matmul(context, p.wo), p.bo)
    return T.mask_rows(out, active.keep)


def feed_forward(x: Tensor, p: BlockParams, active: ActiveSet) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, p.w1), p.b1))
    out = T.add(T.matmul(hidden, p.w2), p.b2)
    return T.mask_rows(out, active.keep)


def encoder_block_forward(x: Tensor, p: BlockParams, active: ActiveSet, mode: str = "additive_mask",
                          eps: float = 1e-12, group: int = 8) -> Tensor:
    attn = multi_head_attention(x, p, active, mode, group=group)
    y = T.mask_rows(T.layer_norm_rows(T.add(x, attn), p.ln1_g, p.ln1_b, eps), active.keep)
    ff = feed_forward(y, p, active)
    return T.mask_rows(T.layer_norm_rows(T.add(y, ff), p.ln2_g, p.ln2_b, eps), active.keep)


def classify(z: Tensor, head: dict[str, Tensor], seq_len: int) -> Tensor:
    """Logits from the CLS row of every stacked sequence."""
    cls_rows = T.take(z, np.arange(0, z.shape[0], seq_len))
    pooled = T.tanh(T.add(T.matmul(cls_rows, head["pool_w"]), head["pool_b"]))
    return T.add(T.matmul(pooled, head["cls_w"]), head["cls_b"])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Encoder:
    """Parameters of the gated encoder plus the forward pass."""

    def __init__(self, config: ModelConfig, dtype=np.float64, rng: np.random.Generator | None = None):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed) if rng is None else rng
        c = config
        std = c.init_std

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        self.tok_table = normal(c.vocab, c.hidden)
        self.pos_table = normal(c.seq_len, c.hidden)
        d = c.head_dim
        self.blocks: list[BlockParams] = []
        for _ in range(c.layers):
            self.blocks.append(BlockParams(
                wq=[normal(c.hidden, d) for _ in range(c.heads)], bq=[zeros(d) for _ in range(c.heads)],
                wk=[normal(c.hidden, d) for _ in range(c.heads)], bk=[zeros(d) for _ in range(c.heads)],
                wv=[normal(c.hidden, d) for _ in range(c.heads)], bv=[zeros(d) for _ in range(c.heads)],
                wo=normal(c.hidden, c.hidden), bo=zeros(c.hidden),
                w1=normal(c.hidden, c.ffn_dim), b1=zeros(c.ffn_dim),
                w2=normal(c.ffn_dim, c.hidden), b2=zeros(c.hidden),
                ln1_g=ones(c.hidden), ln1_b=zeros(c.hidden),
                ln2_g=ones(c.hidden), ln2_b=zeros(c.hidden),
            ))
        self.head = {
            "pool_w": normal(c.hidden, c.hidden), "pool_b": zeros(c.hidden),
            "cls_w": normal(c.hidden, c.classes), "cls_b": zeros(c.classes),
        }
        # gates for blocks 2..L, drawn after the weights so weights do not depend on gating
        self.gates = [GateParams.init_uniform(c.seq_len, rng, c.alpha, self.dtype)
                      for _ in range(c.layers - 1)]

    # -- parameter access -------------------------------------------------
    def named_weights(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed.tokens", self.tok_table
        yield "embed.positions", self.pos_table
        for i, block in enumerate(self.blocks, start=1):
            for name, t in block.named():
                yield f"block{i}.{name}", t
        for name, t in self.head.items():
            yield f"head.{name}", t

    def named_gates(self) -> Iterator[tuple[str, Tensor]]:
        for l, g in enumerate(self.gates, start=2):
            yield f"gate{l}.m", g.m

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.named_weights()
        yield from self.named_gates()

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def gate_values(self) -> np.ndarray:
        """sigma(m) for gated positions, shape [L-1, I-1]."""
        return np.stack([g.values()[1:] for g in self.gates])

    def open_gates(self, value: float = 40.0) -> None:
        for g in self.gates:
            g.m.data[...] = value

    # -- forward ------------------------------------------------------------
    def forward(self, tokens, gated: bool = True, group: int = 8, trace: bool = False,
                routings: list[Routing] | None = None) -> ForwardResult:
        return model_forward(self, tokens, gated=gated, group=group, trace=trace, routings=routings)

    __call__ = forward


def model_forward(model: Encoder, tokens, gated: bool = True, group: int = 8,
                  trace: bool = False, routings: list[Routing] | None = None) -> ForwardResult:
    """Logits and per-block active counts; block 1 is never gated.

    ``routings`` (one per gated block, from a previous result) replays the
    gates' discrete decisions.
    """
    c = model.config
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != c.seq_len:
        raise ValueError(f"expected sequences of length {c.seq_len}, got {tokens.shape[1]}")
    batch = tokens.shape[0]
    mode = c.attention_exclusion

    x = embed(tokens, model.tok_table, model.pos_table)
    active = ActiveSet.full(batch, c.seq_len)
    counts = [c.seq_len]
    sets, inputs, used = [active], [x], []
    x = encoder_block_forward(x, model.blocks[0], active, mode, c.ln_eps, group)
    for l in range(1, c.layers):
        if gated:
            outcome = mask_match(x, model.gates[l - 1], c.seq_len,
                                 routings[l - 1] if routings is not None else None)
            used.append(outcome.routing)
            # a row dropped earlier stays dropped even if matched to an open gate
            active = ActiveSet(outcome.keep & active.keep, c.seq_len)
            x = outcome.x_m
        counts.append(active.count)
        if trace:
            sets.append(active)
            inputs.append(x)
        x = encoder_block_forward(x, model.blocks[l], active, mode, c.ln_eps, group)
    logits = classify(x, model.head, c.seq_len)
    return ForwardResult(logits, counts, sets if trace else [], inputs if trace else [], used)
