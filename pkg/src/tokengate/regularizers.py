"""Polarization objective on the gate vectors.

The CLS slot (index 0 of every gate vector) has no parameter: it adds a
constant 1 to each block's mask mass and nothing to the bi-modal term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class RegularizerInputs:
    masks: Sequence[Tensor]
    seq_len: int
    gamma: float = 0.5
    lambda_filter: float = 0.01
    lambda_bi: float = 2.0
    filter_target_mode: str = "per_block"
    weights: Sequence[float] | None = None  # fixed per-block filter weights, for replay

    @property
    def gated_blocks(self) -> int:
        return len(self.masks)

    @property
    def total_blocks(self) -> int:
        return len(self.masks) + 1


@dataclass
class LossBreakdown:
    task: Tensor
    l_filter: Tensor
    bi_modal: Tensor
    polar: Tensor
    total: Tensor

    def scalars(self) -> dict[str, float]:
        return {name: float(getattr(self, name).data)
                for name in ("task", "l_filter", "bi_modal", "polar", "total")}


def _gated_only(m: Tensor) -> np.ndarray:
    sel = np.ones(m.shape[0], dtype=m.dtype)
    sel[0] = 0.0
    return sel


def mask_mass(m: Tensor) -> Tensor:
    """1 (CLS) + sum of sigma(m_i) over gated positions."""
    return T.add(T.sum_(T.mul(T.sigmoid(m), _gated_only(m))), 1.0)


def filter_weight(mass: float, seq_len: int) -> float:
    """Per-block weight 1.5 - mass / I; blocks keeping fewer tokens weigh more."""
    return 1.5 - float(mass) / seq_len


def user_target(seq_len: int, total_blocks: int, gamma: float, mode: str = "per_block") -> float:
    if mode == "per_block":
        return seq_len * gamma
    if mode == "paper_literal":
        return seq_len * total_blocks * gamma
    raise ValueError(f"unknown filter target mode {mode!r}")


def filter_loss(inputs: RegularizerInputs) -> Tensor:
    if not 0.0 <= inputs.gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {inputs.gamma}")
    target = user_target(inputs.seq_len, inputs.total_blocks, inputs.gamma, inputs.filter_target_mode)
    terms = []
    for k, m in enumerate(inputs.masks):
        mass = mask_mass(m)
        if inputs.weights is None:
            w = filter_weight(mass.data, inputs.seq_len)  # constant coefficient, no gradient
        else:
            w = inputs.weights[k]
        terms.append(T.abs_(T.mul(T.sub(mass, target), w)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / inputs.gated_blocks)


def current_weights(inputs: RegularizerInputs) -> list[float]:
    return [filter_weight(mask_mass(m).data, inputs.seq_len) for m in inputs.masks]


def bi_modal_penalty(masks: Sequence[Tensor]) -> Tensor:
    terms = []
    for m in masks:
        s = T.sigmoid(m)
        terms.append(T.sum_(T.mul(T.mul(s, T.sub(1.0, s)), _gated_only(m))))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def polar_and_total(task_loss: Tensor, inputs: RegularizerInputs) -> LossBreakdown:
    lf = filter_loss(inputs)
    bi = bi_modal_penalty(inputs.masks)
    polar = T.add(T.mul(lf, inputs.lambda_filter), T.mul(bi, inputs.lambda_bi))
    total = T.add(task_loss, polar)
    return LossBreakdown(task=task_loss, l_filter=lf, bi_modal=bi, polar=polar, total=total)
