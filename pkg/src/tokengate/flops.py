"""Analytic FLOPs for gated encoders.

Convention: one FLOP per multiply-accumulate in the Q, K, V and output
projections (4 * J^2 per token) and the two FFN projections (8 * J^2 per
token with a 4J inner width), i.e. ``12 * active * J^2`` per block. Attention
score/context products, softmax, layer norm and bias adds are not counted.
With 12 blocks, 128 tokens and J=768 this gives 10,871,635,968 FLOPs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

FULL_SCALE_DIMS = {"layers": 12, "seq_len": 128, "hidden": 768}


@dataclass
class BlockCost:
    block: int
    active: int
    flops: int
    extended_flops: int


@dataclass
class FlopsReport:
    per_block: list[BlockCost]
    total: int
    baseline: int
    extended_total: int = 0
    seq_len: int = 0
    hidden: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.baseline / self.total if self.total else float("inf")

    @property
    def speedup_label(self) -> str:
        return speedup_format(self)

    @property
    def total_label(self) -> str:
        return megaflops(self.total)

    def to_dict(self) -> dict:
        return {
            "per_block": [vars(b) for b in self.per_block],
            "total": self.total,
            "baseline": self.baseline,
            "speedup": self.speedup,
            "total_label": self.total_label,
            "speedup_label": self.speedup_label,
            "extended_total": self.extended_total,
            "seq_len": self.seq_len,
            "hidden": self.hidden,
            **({"meta": self.meta} if self.meta else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "active", "flops"])
        for b in self.per_block:
            w.writerow([b.block, b.active, b.flops])
        w.writerow(["total", "", self.total])
        w.writerow(["baseline", "", self.baseline])
        w.writerow(["speedup", "", f"{self.speedup:.6f}"])
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"{'block':>5} {'active':>6} {'flops':>16}"]
        for b in self.per_block:
            lines.append(f"{b.block:>5} {b.active:>6} {b.flops:>16,d}")
        lines.append(f"total    {self.total:,d} ({self.total_label})")
        lines.append(f"baseline {self.baseline:,d} ({megaflops(self.baseline)})")
        lines.append(f"speedup  {self.speedup_label}")
        return "\n".join(lines)


def block_flops(active_count: int, hidden: int) -> int:
    if active_count < 0:
        raise ValueError("active_count must be non-negative")
    return 12 * int(active_count) * int(hidden) ** 2


def attention_product_flops(active_count: int, hidden: int) -> int:
    """Score (Q K^T) and context (A V) multiply-accumulates over live tokens."""
    return 2 * int(active_count) ** 2 * int(hidden)


def model_flops(active_counts: Sequence[int], seq_len: int, hidden: int,
                layers: int | None = None) -> FlopsReport:
    counts = [int(c) for c in active_counts]
    if layers is not None and len(counts) != layers:
        raise ValueError(f"expected {layers} active counts, got {len(counts)}")
    if hidden <= 0 or seq_len <= 0:
        raise ValueError("seq_len and hidden must be positive")
    for i, c in enumerate(counts):
        if not 0 <= c <= seq_len:
            raise ValueError(f"active count {c} for block {i + 1} outside [0, {seq_len}]")
    per_block = [BlockCost(i, c, block_flops(c, hidden), block_flops(c, hidden) + attention_product_flops(c, hidden))
                 for i, c in enumerate(counts, start=1)]
    total = sum(b.flops for b in per_block)
    baseline = len(counts) * block_flops(seq_len, hidden)
    return FlopsReport(per_block, total, baseline, sum(b.extended_flops for b in per_block), seq_len, hidden)


def gamma_schedule(gamma: float, seq_len: int, layers: int) -> list[int]:
    """Full first block, then round(gamma * I) tokens in every gated block."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return [seq_len] + [int(round(gamma * seq_len))] * (layers - 1)


def megaflops(flops: int) -> str:
    return f"{round(flops / 1e6)}M"


def speedup_format(report: FlopsReport) -> str:
    if report.total <= 0:
        raise ValueError("speedup undefined for zero total FLOPs")
    return f"{report.baseline / report.total:.2f}×"
