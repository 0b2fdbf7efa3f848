"""Mask matching: score tokens, sort, pair with sorted gate values, threshold, unsort.

Position 0 of every sequence is the CLS token. It is never sorted, never
thresholded, and always carries gate value 1. Inputs may hold several
sequences stacked row-wise (``[B * seq_len, J]``); each sequence is sorted
independently against the same gate vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, expand_cols, gather_rows, mask_rows, mul, add, scatter_rows, sigmoid, take


@dataclass
class GateParams:
    m: Tensor
    alpha: float = 0.5

    @classmethod
    def init_uniform(cls, seq_len: int, rng: np.random.Generator, alpha: float = 0.5,
                     dtype=np.float64) -> "GateParams":
        m = Tensor(rng.uniform(0.0, 1.0, size=seq_len).astype(dtype), requires_grad=True)
        return cls(m=m, alpha=alpha)

    @property
    def seq_len(self) -> int:
        return self.m.shape[0]

    def values(self) -> np.ndarray:
        """Gate values sigma(m) with the CLS slot pinned to 1."""
        v = _sigmoid_np(self.m.data)
        v[0] = 1.0
        return v


@dataclass
class Routing:
    """Orderings and threshold decisions of one gate application; replayable."""

    perm: np.ndarray
    gate_idx: np.ndarray
    keep_sorted: np.ndarray


@dataclass
class GateOutcome:
    x_m: Tensor
    keep: np.ndarray
    perm: np.ndarray
    scores: np.ndarray
    matched: np.ndarray  # gate value applied to each row, original order
    routing: Routing | None = None


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def importance_scores(x) -> np.ndarray:
    """Per-row L1 mass. Computed off the tape: it only feeds the sort."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.abs(data).sum(axis=1)


def sort_permutation(s) -> np.ndarray:
    """Descending, stable order of positions 1..n-1; position 0 stays first."""
    s = np.asarray(s)
    rest = np.argsort(-s[1:], kind="stable") + 1
    return np.concatenate([[0], rest]).astype(np.int64)


def keep_flags(g: GateParams) -> np.ndarray:
    flags = g.values() >= g.alpha
    flags[0] = True
    return flags


def _gate_vector(g: GateParams) -> Tensor:
    n = g.seq_len
    not_cls = np.ones(n, dtype=g.m.dtype)
    not_cls[0] = 0.0
    cls = np.zeros(n, dtype=g.m.dtype)
    cls[0] = 1.0
    return add(mul(sigmoid(g.m), not_cls), cls)


def mask_match(x: Tensor, g: GateParams, seq_len: int | None = None,
               routing: Routing | None = None) -> GateOutcome:
    """Gate the rows of ``x``.

    Passing ``routing`` from an earlier outcome replays its orderings and keep
    decisions instead of recomputing them, which freezes the discrete part of
    the pipeline (used for finite-difference checks).
    """
    n = g.seq_len if seq_len is None else seq_len
    rows, width = x.shape
    if rows % n:
        raise ValueError(f"{rows} rows do not split into sequences of length {n}")
    batch = rows // n

    scores = importance_scores(x)
    gates = _gate_vector(g)
    if routing is None:
        gate_rank = sort_permutation(gates.data)  # gate slot matched to rank k
        perm = np.empty(rows, dtype=np.int64)
        for b in range(batch):
            perm[b * n:(b + 1) * n] = b * n + sort_permutation(scores[b * n:(b + 1) * n])
        gate_idx = np.tile(gate_rank, batch)
    else:
        perm, gate_idx = routing.perm, routing.gate_idx

    sorted_x = gather_rows(x, perm)
    sorted_gates = take(gates, gate_idx)
    matched = mul(sorted_x, expand_cols(sorted_gates, width))
    if routing is None:
        keep_sorted = sorted_gates.data >= g.alpha
        keep_sorted[::n] = True
    else:
        keep_sorted = routing.keep_sorted
    thresholded = mask_rows(matched, keep_sorted)
    x_m = scatter_rows(thresholded, perm)

    keep = np.empty(rows, dtype=bool)
    keep[perm] = keep_sorted
    applied = np.empty(rows, dtype=sorted_gates.dtype)
    applied[perm] = sorted_gates.data
    return GateOutcome(x_m=x_m, keep=keep, perm=perm, scores=scores, matched=applied,
                       routing=Routing(perm, gate_idx, keep_sorted))
