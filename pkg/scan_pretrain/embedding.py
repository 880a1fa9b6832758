"""Core numeric types and the semantic / appearance / combined similarities.

Every inner product in this package that feeds a neighbor score goes through
:func:`row_dots`, so scalar, vectorized and sharded code paths agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadShape,
    DimensionMismatch,
    IndexOutOfRange,
    LabelMismatch,
    NotNormalized,
    ZeroRow,
)

ZERO_NORM = 1e-12
UNIT_TOLERANCE = 1e-6
MATRIX_UNIT_TOLERANCE = 1e-9


def row_dots(rows: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """Inner product of every row with ``vector``, reduced along the contiguous axis."""
    return np.multiply(rows, vector).sum(axis=-1)


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if values.ndim != 2:
            raise BadShape(f"embedding matrix must be 2-d, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise BadShape(f"embedding matrix needs n >= 1 and d >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise BadShape("embedding matrix contains NaN or Inf")
        if self.normalized:
            norms = np.sqrt((values * values).sum(axis=1))
            bad = np.flatnonzero(np.abs(norms - 1.0) > MATRIX_UNIT_TOLERANCE)
            if bad.size:
                raise NotNormalized(float(norms[bad[0]]), int(bad[0]))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])

    def rows(self, index: Sequence[int] | np.ndarray) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.values[np.asarray(index, dtype=np.int64)], self.normalized)


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    modes: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if labels.size and labels.min() < 0:
            raise BadShape("class ids must be non-negative")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.modes is not None:
            modes = np.array(self.modes, dtype=np.int64, copy=True).reshape(-1)
            if modes.shape != labels.shape:
                raise LabelMismatch(int(modes.size), int(labels.size))
            if modes.size and modes.min() < 0:
                raise BadShape("mode ids must be non-negative")
            modes.setflags(write=False)
            object.__setattr__(self, "modes", modes)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def has_modes(self) -> bool:
        return self.modes is not None

    def check_aligned(self, matrix: EmbeddingMatrix) -> None:
        if self.n != matrix.n:
            raise LabelMismatch(self.n, matrix.n)


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    values = m.values
    norms = np.sqrt((values * values).sum(axis=1))
    zero = np.flatnonzero(norms <= ZERO_NORM)
    if zero.size:
        raise ZeroRow(int(zero[0]))
    return EmbeddingMatrix(values / norms[:, None], normalized=True)


def require_normalized(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Return ``m`` flagged normalized, validating rows if the flag is unset."""
    if m.normalized:
        return m
    return EmbeddingMatrix(m.values, normalized=True)


def _check_unit(vector: np.ndarray) -> None:
    norm = float(np.sqrt(np.multiply(vector, vector).sum()))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise NotNormalized(norm)


def semantic_similarity(y_i: int, y_j: int) -> float:
    return 1.0 if int(y_i) == int(y_j) else 0.0


def appearance_similarity(a_i: np.ndarray, a_j: np.ndarray) -> float:
    a_i = np.asarray(a_i, dtype=np.float64)
    a_j = np.asarray(a_j, dtype=np.float64)
    if a_i.shape != a_j.shape:
        raise DimensionMismatch(a_i.shape[-1], a_j.shape[-1])
    _check_unit(a_i)
    _check_unit(a_j)
    return (float(row_dots(a_i, a_j)) + 1.0) / 2.0


def combined_similarity(x_i: tuple[np.ndarray, int], x_j: tuple[np.ndarray, int]) -> float:
    (a_i, y_i), (a_j, y_j) = x_i, x_j
    # appearance first so its precondition errors surface even across classes
    sim_a = appearance_similarity(a_i, a_j)
    return semantic_similarity(y_i, y_j) * sim_a


@dataclass(frozen=True)
class ScoreTable:
    """Combined scores of each query against the whole gallery."""

    queries: np.ndarray
    scores: np.ndarray
    is_self: np.ndarray


def combined_scores_for(values: np.ndarray, labels: np.ndarray, query: int) -> np.ndarray:
    """Combined similarity of gallery row ``query`` against every gallery row."""
    sim_a = (row_dots(values, values[query]) + 1.0) / 2.0
    sim_s = (labels == labels[query]).astype(np.float64)
    return sim_s * sim_a


def pairwise_combined(
    matrix: EmbeddingMatrix,
    labels: LabelVector,
    queries: Sequence[int] | np.ndarray,
) -> ScoreTable:
    matrix = require_normalized(matrix)
    labels.check_aligned(matrix)
    query_idx = np.asarray(queries, dtype=np.int64).reshape(-1)
    for q in query_idx:
        if q < 0 or q >= matrix.n:
            raise IndexOutOfRange(int(q), matrix.n)

    scores = np.empty((query_idx.size, matrix.n), dtype=np.float64)
    for row, q in enumerate(query_idx):
        scores[row] = combined_scores_for(matrix.values, labels.labels, int(q))
    is_self = query_idx[:, None] == np.arange(matrix.n)[None, :]
    return ScoreTable(queries=query_idx, scores=scores, is_self=is_self)
