from __future__ import annotations

from typing import Literal

import numpy as np

from .embedding import UNIT_TOLERANCE
from .errors import BadShape, BatchTooLarge, DimensionMismatch, NotNormalized

BankInit = Literal["random", "empty"]
DEFAULT_BANK_CAPACITY = 4096


class MemoryBank:
    """Fixed-capacity FIFO of unit-normalized key features (the negative pool)."""

    def __init__(self, capacity: int, dim: int, init: BankInit = "random", seed: int = 0) -> None:
        if capacity < 1 or dim < 1:
            raise BadShape(f"bank needs capacity >= 1 and dim >= 1, got ({capacity}, {dim})")
        if init not in ("random", "empty"):
            raise BadShape(f"unknown bank init '{init}'. Expected one of: random, empty.")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._rows = np.zeros((self.capacity, self.dim), dtype=np.float64)
        self._cursor = 0
        self._occupancy = 0
        if init == "random":
            rng = np.random.default_rng(seed)
            rows = rng.standard_normal((self.capacity, self.dim))
            self._rows[:] = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            self._occupancy = self.capacity

    @property
    def occupancy(self) -> int:
        return self._occupancy

    @property
    def cursor(self) -> int:
        return self._cursor

    def __len__(self) -> int:
        return self._occupancy

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise DimensionMismatch(self.dim, keys.shape[-1], "key dimension")
        count = keys.shape[0]
        if count > self.capacity:
            raise BatchTooLarge(count, self.capacity)
        norms = np.sqrt((keys * keys).sum(axis=1))
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)
        if bad.size:
            raise NotNormalized(float(norms[bad[0]]), int(bad[0]))
        if count == 0:
            return

        end = self._cursor + count
        if end <= self.capacity:
            self._rows[self._cursor:end] = keys
        else:
            head = self.capacity - self._cursor
            self._rows[self._cursor:] = keys[:head]
            self._rows[:count - head] = keys[head:]
        self._cursor = end % self.capacity
        self._occupancy = min(self.capacity, self._occupancy + count)

    def negatives_view(self) -> np.ndarray:
        """Read-only snapshot of the stored rows in storage order."""
        snapshot = self._rows[:self._occupancy].copy()
        snapshot.setflags(write=False)
        return snapshot

    def oldest_first(self) -> np.ndarray:
        """Stored rows from oldest to newest enqueue."""
        if self._occupancy < self.capacity:
            return self.negatives_view()
        snapshot = np.roll(self._rows, -self._cursor, axis=0)
        snapshot.setflags(write=False)
        return snapshot


def new_bank(capacity: int, dim: int, init: BankInit = "random", seed: int = 0) -> MemoryBank:
    return MemoryBank(capacity, dim, init=init, seed=seed)
