"""Exception hierarchy shared by every scan-pretrain module.

Each error carries an ``exit_code`` so the CLI can map failures without a
lookup table: configuration/usage problems exit 1, data problems exit 2.
"""
from __future__ import annotations

from typing import Optional


class ScanError(Exception):
    exit_code = 2


class ConfigError(ScanError):
    exit_code = 1


# data


class DataError(ScanError):
    pass


class FileIoError(DataError):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path


class FormatError(DataError):
    pass


class FormatVersionError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class LabelMismatch(DataError):
    def __init__(self, labels: int, rows: int) -> None:
        super().__init__(f"labels length {labels} does not match {rows} matrix rows")
        self.labels = labels
        self.rows = rows


class TableMismatch(DataError):
    def __init__(self, table_n: int, dataset_n: int) -> None:
        super().__init__(f"neighbor table covers {table_n} samples, dataset has {dataset_n}")
        self.table_n = table_n
        self.dataset_n = dataset_n


class EmptyTrainSet(DataError):
    pass


class IndexOutOfRange(DataError):
    def __init__(self, index: int, size: int) -> None:
        super().__init__(f"index {index} out of range for {size} rows")
        self.index = index
        self.size = size


# shapes


class ShapeError(ScanError):
    pass


class DimensionMismatch(ShapeError):
    def __init__(self, expected: int, got: int, what: str = "dimension") -> None:
        super().__init__(f"{what} mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class BadShape(ShapeError):
    pass


class ShapeMismatch(ShapeError):
    pass


class BatchTooLarge(ShapeError):
    def __init__(self, rows: int, capacity: int) -> None:
        super().__init__(f"batch of {rows} rows exceeds bank capacity {capacity}")
        self.rows = rows
        self.capacity = capacity


# numerics


class NumericError(ScanError):
    pass


class ZeroRow(NumericError):
    def __init__(self, index: int) -> None:
        super().__init__(f"row {index} has (near) zero norm")
        self.index = index


class NotNormalized(NumericError):
    def __init__(self, norm: float, index: Optional[int] = None) -> None:
        where = f"row {index}" if index is not None else "vector"
        super().__init__(f"{where} is not unit-normalized (norm={norm!r})")
        self.norm = norm
        self.index = index


class BadTemperature(NumericError):
    def __init__(self, tau: float) -> None:
        super().__init__(f"temperature must be > 0, got {tau!r}")
        self.tau = tau


class EmptyBank(NumericError):
    pass


class EmptyNegativeSet(NumericError):
    def __init__(self, anchor: int) -> None:
        super().__init__(f"anchor {anchor} has no negatives (no other group in batch, empty bank)")
        self.anchor = anchor


class StaleCache(NumericError):
    pass


class NotConverged(UserWarning):
    """Issued (never raised) when an iterative probe stops at max iterations."""
