"""Positive-neighbor mining under the combined (class x appearance) similarity.

Two implementations produce the same :class:`NeighborTable`:

- :func:`mine_bruteforce` scores every query against the full gallery.
- :func:`mine_fast` partitions the gallery by class, preselects candidates with
  blocked matrix products on a thread pool, then re-scores the survivors with
  the same per-row reduction the brute-force path uses.
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .embedding import (
    EmbeddingMatrix,
    LabelVector,
    combined_scores_for,
    require_normalized,
    row_dots,
)
from .errors import BadShape, CorruptFileError, FileIoError, FormatVersionError, LabelMismatch

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"SCNT"
TABLE_VERSION = 1
MAX_LIST_LENGTH = 0xFFFF

QUERY_BLOCK = 256
# Per-row rounding of a unit-vector inner product stays far below this; any
# candidate within it of the blocked k-th score is re-scored exactly.
PRESELECT_SLACK = 1e-9
# Scores are stored as f32; two scores that round to the same f32 differ by
# less than this, so such near-ties must survive preselection.
SCORE_SPACING = float(np.spacing(np.float32(1.0)))

_PAIR_DTYPE = np.dtype([("index", "<u4"), ("score", "<f4")])


@dataclass
class NeighborTable:
    k: int
    indices: List[np.ndarray] = field(default_factory=list)
    scores: List[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def shortfall(self) -> np.ndarray:
        return np.array([self.k - idx.size for idx in self.indices], dtype=np.int64)

    @property
    def shortfall_total(self) -> int:
        return int(self.shortfall.sum()) if self.n else 0

    def neighbors(self, query: int, k: int | None = None) -> np.ndarray:
        idx = self.indices[query]
        return idx if k is None else idx[:k]

    def truncate(self, k: int) -> "NeighborTable":
        if k > self.k:
            raise BadShape(f"cannot widen a table mined with k={self.k} to k={k}")
        return NeighborTable(
            k=k,
            indices=[idx[:k].copy() for idx in self.indices],
            scores=[s[:k].copy() for s in self.scores],
        )

    def equals(self, other: "NeighborTable") -> bool:
        if self.k != other.k or self.n != other.n:
            return False
        return all(
            np.array_equal(a, b) and np.array_equal(sa, sb)
            for a, b, sa, sb in zip(self.indices, other.indices, self.scores, other.scores)
        )

    def class_pure(self, labels: LabelVector) -> bool:
        return all(
            bool(np.all(labels.labels[idx] == labels.labels[q]))
            for q, idx in enumerate(self.indices)
        )


def _validate(matrix: EmbeddingMatrix, labels: LabelVector, k: int) -> EmbeddingMatrix:
    if k < 0:
        raise BadShape(f"k must be >= 0, got {k}")
    if k > MAX_LIST_LENGTH:
        raise BadShape(f"k must be <= {MAX_LIST_LENGTH}, got {k}")
    if labels.n != matrix.n:
        raise LabelMismatch(labels.n, matrix.n)
    return require_normalized(matrix)


def _rank(candidates: np.ndarray, scores: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Rank on f32-rounded scores so a saved table reloads unchanged."""
    scores = scores.astype(np.float32).astype(np.float64)
    keep = scores > 0.0
    candidates, scores = candidates[keep], scores[keep]
    order = np.lexsort((candidates, -scores))[:k]
    return candidates[order].astype(np.int64), scores[order]


def mine_bruteforce(matrix: EmbeddingMatrix, labels: LabelVector, k: int) -> NeighborTable:
    matrix = _validate(matrix, labels, k)
    table = NeighborTable(k=k)
    gallery = np.arange(matrix.n, dtype=np.int64)
    for q in range(matrix.n):
        if k == 0:
            table.indices.append(np.empty(0, dtype=np.int64))
            table.scores.append(np.empty(0, dtype=np.float64))
            continue
        scores = combined_scores_for(matrix.values, labels.labels, q)
        others = gallery != q
        idx, sc = _rank(gallery[others], scores[others], k)
        table.indices.append(idx)
        table.scores.append(sc)
    return table


def _mine_shard(
    values: np.ndarray,
    members: np.ndarray,
    queries: np.ndarray,
    k: int,
) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Neighbors of ``queries`` among ``members`` (all rows of one class)."""
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    approx = values[queries] @ values[members].T
    for row, q in enumerate(queries):
        others = members != q
        candidates = members[others]
        if candidates.size > k:
            rough = approx[row][others]
            kth = np.partition(rough, candidates.size - k)[candidates.size - k]
            candidates = candidates[rough >= kth - 2.0 * (PRESELECT_SLACK + SCORE_SPACING)]
        exact = (row_dots(values[candidates], values[q]) + 1.0) / 2.0
        out[int(q)] = _rank(candidates, exact, k)
    return out


def mine_fast(
    matrix: EmbeddingMatrix,
    labels: LabelVector,
    k: int,
    workers: int = 1,
    block: int = QUERY_BLOCK,
) -> NeighborTable:
    matrix = _validate(matrix, labels, k)
    n = matrix.n
    if k == 0:
        return NeighborTable(
            k=0,
            indices=[np.empty(0, dtype=np.int64) for _ in range(n)],
            scores=[np.empty(0, dtype=np.float64) for _ in range(n)],
        )

    values = matrix.values
    shards: List[Tuple[np.ndarray, np.ndarray]] = []
    for cls in np.unique(labels.labels):
        members = np.flatnonzero(labels.labels == cls).astype(np.int64)
        for start in range(0, members.size, block):
            shards.append((members, members[start:start + block]))

    logger.debug("mining %d rows in %d shards with %d workers", n, len(shards), workers)
    results: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        futures = [pool.submit(_mine_shard, values, members, queries, k) for members, queries in shards]
        for future in futures:
            results.update(future.result())

    table = NeighborTable(k=k)
    for q in range(n):
        idx, sc = results[q]
        table.indices.append(idx)
        table.scores.append(sc)
    logger.info("mined k=%d over %d rows; shortfall total %d", k, n, table.shortfall_total)
    return table


def save_table(table: NeighborTable, path: str | Path) -> None:
    chunks = [TABLE_MAGIC, struct.pack("<BII", TABLE_VERSION, table.n, table.k)]
    for idx, sc in zip(table.indices, table.scores):
        pairs = np.empty(idx.size, dtype=_PAIR_DTYPE)
        pairs["index"] = idx
        pairs["score"] = sc
        chunks.append(struct.pack("<H", idx.size))
        chunks.append(pairs.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc


def load_table(path: str | Path) -> NeighborTable:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc

    header = len(TABLE_MAGIC) + struct.calcsize("<BII")
    if len(blob) < header or blob[:4] != TABLE_MAGIC:
        raise FormatVersionError(f"{path}: not a neighbor table (bad magic or short header)")
    version, n, k = struct.unpack_from("<BII", blob, 4)
    if version != TABLE_VERSION:
        raise FormatVersionError(f"{path}: unsupported neighbor table version {version}")

    table = NeighborTable(k=k)
    offset = header
    for q in range(n):
        if offset + 2 > len(blob):
            raise CorruptFileError(f"{path}: truncated at query {q}")
        (length,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        end = offset + length * _PAIR_DTYPE.itemsize
        if end > len(blob):
            raise CorruptFileError(f"{path}: truncated at query {q}")
        pairs = np.frombuffer(blob, dtype=_PAIR_DTYPE, count=length, offset=offset)
        table.indices.append(pairs["index"].astype(np.int64))
        table.scores.append(pairs["score"].astype(np.float64))
        offset = end
    if offset != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - offset} trailing bytes")
    return table
