"""Contrastive objectives: MoCo, SCAN (neighborhood pseudo-labels) and SCL.

All three share one kernel. For an anchor ``i`` with positive set ``P(i)``
(batch instances with the anchor's group id, the anchor itself included):

    loss_i = 1/|P(i)| * sum_{j in P(i)} ( -s_ij + log Den_ij )

where ``s_it = f_i . g_t / tau`` and, under the default ``paper`` convention (negatives only),
``Den_ij`` is the sum of ``exp`` over every batch instance of a different group
plus every bank row. The ``infonce`` convention adds ``exp(s_ij)`` itself.
The batch loss is the mean over anchors only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Literal, Optional

import numpy as np

from .errors import BadShape, BadTemperature, DimensionMismatch, EmptyBank, EmptyNegativeSet

Denominator = Literal["paper", "infonce"]
DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class LossConfig:
    denominator: Denominator = "paper"

    def __post_init__(self) -> None:
        if self.denominator not in ("paper", "infonce"):
            raise BadShape(f"unknown denominator '{self.denominator}'. Expected one of: paper, infonce.")


@dataclass(eq=False)
class PseudoLabeledBatch:
    f_embeddings: np.ndarray
    g_embeddings: np.ndarray
    pseudo_labels: np.ndarray
    anchors: np.ndarray
    class_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.f_embeddings = np.asarray(self.f_embeddings, dtype=np.float64)
        self.g_embeddings = np.asarray(self.g_embeddings, dtype=np.float64)
        self.pseudo_labels = np.asarray(self.pseudo_labels, dtype=np.int64).reshape(-1)
        self.anchors = np.asarray(self.anchors, dtype=bool).reshape(-1)
        if self.f_embeddings.ndim != 2 or self.f_embeddings.shape != self.g_embeddings.shape:
            raise BadShape(
                f"f/g embeddings must share a 2-d shape, got {self.f_embeddings.shape} and {self.g_embeddings.shape}"
            )
        n = self.f_embeddings.shape[0]
        if self.pseudo_labels.size != n or self.anchors.size != n:
            raise BadShape(f"pseudo labels and anchor flags must have {n} entries")
        if not self.anchors.any():
            raise BadShape("batch has no anchors")
        if self.class_labels is not None:
            self.class_labels = np.asarray(self.class_labels, dtype=np.int64).reshape(-1)
            if self.class_labels.size != n:
                raise BadShape(f"class labels must have {n} entries")

    @property
    def size(self) -> int:
        return int(self.f_embeddings.shape[0])

    @property
    def num_anchors(self) -> int:
        return int(self.anchors.sum())


@dataclass(frozen=True)
class LossOutput:
    loss: float
    grad_f: np.ndarray
    grad_g: np.ndarray


def _check_tau(tau: float) -> None:
    if not tau > 0.0 or not np.isfinite(tau):
        raise BadTemperature(tau)


def _bank_rows(bank: Optional[np.ndarray], dim: int) -> np.ndarray:
    if bank is None:
        return np.empty((0, dim))
    rows = np.asarray(bank, dtype=np.float64)
    if rows.ndim != 2 or (rows.shape[0] and rows.shape[1] != dim):
        raise DimensionMismatch(dim, rows.shape[-1], "bank dimension")
    return rows.reshape(-1, dim)


def _grouped_contrastive(
    f: np.ndarray,
    g: np.ndarray,
    groups: np.ndarray,
    anchors: np.ndarray,
    bank: Optional[np.ndarray],
    tau: float,
    config: LossConfig,
) -> LossOutput:
    _check_tau(tau)
    dim = f.shape[1]
    z = _bank_rows(bank, dim)
    anchor_idx = np.flatnonzero(anchors)
    fa = f[anchor_idx]
    s_batch = fa @ g.T / tau
    s_bank = fa @ z.T / tau
    positive = groups[anchor_idx][:, None] == groups[None, :]
    pos_count = positive.sum(axis=1).astype(np.float64)

    neg_batch = np.where(positive, -np.inf, s_batch)
    shift = np.max(np.concatenate([neg_batch, s_bank], axis=1), axis=1, initial=-np.inf)
    empty = np.flatnonzero(~np.isfinite(shift))
    if empty.size:
        raise EmptyNegativeSet(int(anchor_idx[empty[0]]))
    sum_neg = np.exp(neg_batch - shift[:, None]).sum(axis=1) + np.exp(s_bank - shift[:, None]).sum(axis=1)
    lse_neg = shift + np.log(sum_neg)

    pos_logits = np.where(positive, s_batch, 0.0)
    if config.denominator == "paper":
        per_anchor = -pos_logits.sum(axis=1) / pos_count + lse_neg
        coef_pos = -positive.astype(np.float64) / pos_count[:, None]
        neg_weight = np.ones_like(lse_neg)
    else:
        log_den = np.logaddexp(lse_neg[:, None], s_batch)
        terms = np.where(positive, log_den - s_batch, 0.0)
        per_anchor = terms.sum(axis=1) / pos_count
        own = np.where(positive, np.exp(s_batch - log_den), 0.0)
        coef_pos = (own - positive.astype(np.float64)) / pos_count[:, None]
        neg_weight = np.where(positive, np.exp(lse_neg[:, None] - log_den), 0.0).sum(axis=1) / pos_count

    # d loss_i / d negative logit = softmax over negatives, scaled for infonce
    coef_batch = np.where(positive, coef_pos, np.exp(neg_batch - lse_neg[:, None]) * neg_weight[:, None])
    coef_bank = np.exp(s_bank - lse_neg[:, None]) * neg_weight[:, None]

    num_anchors = anchor_idx.size
    coef_batch /= num_anchors
    coef_bank /= num_anchors

    grad_f = np.zeros_like(f)
    grad_f[anchor_idx] = (coef_batch @ g + coef_bank @ z) / tau
    grad_g = coef_batch.T @ fa / tau
    return LossOutput(loss=float(np.mean(per_anchor)), grad_f=grad_f, grad_g=grad_g)


def moco_loss(
    f_q: np.ndarray,
    g_k: np.ndarray,
    bank: np.ndarray,
    tau: float = DEFAULT_TEMPERATURE,
    config: LossConfig = LossConfig(),
) -> LossOutput:
    """Single-query MoCo loss; gradients come back as one-row matrices."""
    _check_tau(tau)
    f_row = np.asarray(f_q, dtype=np.float64).reshape(1, -1)
    g_row = np.asarray(g_k, dtype=np.float64).reshape(1, -1)
    z = _bank_rows(bank, f_row.shape[1])
    if z.shape[0] == 0:
        raise EmptyBank("MoCo loss needs at least one bank row")
    # a lone query with its own group id: every bank row is a negative
    return _grouped_contrastive(
        f_row, g_row, np.zeros(1, dtype=np.int64), np.ones(1, dtype=bool), z, tau, config
    )


def scan_loss(
    batch: PseudoLabeledBatch,
    bank: Optional[np.ndarray],
    tau: float = DEFAULT_TEMPERATURE,
    config: LossConfig = LossConfig(),
) -> LossOutput:
    return _grouped_contrastive(
        batch.f_embeddings, batch.g_embeddings, batch.pseudo_labels, batch.anchors, bank, tau, config
    )


def scl_loss(
    batch: PseudoLabeledBatch,
    bank: Optional[np.ndarray],
    tau: float = DEFAULT_TEMPERATURE,
    config: LossConfig = LossConfig(),
) -> LossOutput:
    """Positive set = every batch instance sharing the anchor's true class."""
    labels = batch.class_labels if batch.class_labels is not None else batch.pseudo_labels
    return _grouped_contrastive(batch.f_embeddings, batch.g_embeddings, labels, batch.anchors, bank, tau, config)


def moco_batch_loss(
    batch: PseudoLabeledBatch,
    bank: Optional[np.ndarray],
    tau: float = DEFAULT_TEMPERATURE,
    config: LossConfig = LossConfig(),
) -> LossOutput:
    """Instance discrimination over a batch: every instance is its own group."""
    singletons = np.arange(batch.size, dtype=np.int64)
    return _grouped_contrastive(batch.f_embeddings, batch.g_embeddings, singletons, batch.anchors, bank, tau, config)


Objective = Callable[[PseudoLabeledBatch, Optional[np.ndarray], float, LossConfig], LossOutput]

_REGISTRY: Dict[str, Objective] = {
    "moco": moco_batch_loss,
    "scan": scan_loss,
    "scl": scl_loss,
}


def get_objective(name: str) -> Objective:
    fn = _REGISTRY.get(name)
    if fn is None:
        raise ValueError(f"Unknown objective '{name}'. Available: {sorted(_REGISTRY)}")
    return fn
