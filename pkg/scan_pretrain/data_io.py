"""Dataset / embedding file formats and the synthetic class-and-mode benchmark.

SCNV (dataset)::

    b"SCNV" | u8 version | u32 n | u32 d | u8 flags (bit0: has modes)
    | n*d f32 rows | n i32 class labels | [n i32 mode labels]

SCNE (embeddings) is the same header with magic ``SCNE``, flags always 0, and
no label sections. Everything little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import BadShape, CorruptFileError, FileIoError, FormatVersionError, LabelMismatch

DATASET_MAGIC = b"SCNV"
EMBEDDING_MAGIC = b"SCNE"
FORMAT_VERSION = 1
FLAG_HAS_MODES = 0x01

_HEADER = struct.Struct("<4sBIIB")


@dataclass(eq=False)
class VectorDataset:
    features: np.ndarray
    labels: np.ndarray
    modes: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise BadShape(f"features must be 2-d, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise BadShape("features contain NaN or Inf")
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if self.labels.size != self.n:
            raise LabelMismatch(int(self.labels.size), self.n)
        if self.modes is not None:
            self.modes = np.asarray(self.modes, dtype=np.int32).reshape(-1)
            if self.modes.size != self.n:
                raise LabelMismatch(int(self.modes.size), self.n)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def has_modes(self) -> bool:
        return self.modes is not None

    def subset(self, index: np.ndarray) -> "VectorDataset":
        index = np.asarray(index, dtype=np.int64)
        return VectorDataset(
            features=self.features[index],
            labels=self.labels[index],
            modes=None if self.modes is None else self.modes[index],
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    modes: int = 4
    dim: int = 64
    per_mode: int = 200
    class_radius: float = 1.0
    mode_radius: float = 1.0
    noise: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        for name in ("classes", "modes", "dim", "per_mode"):
            if getattr(self, name) < 1:
                raise BadShape(f"synthetic {name} must be >= 1, got {getattr(self, name)}")
        if self.class_radius <= 0 or self.mode_radius <= 0:
            raise BadShape("synthetic radii must be > 0")
        if self.noise < 0:
            raise BadShape(f"synthetic noise must be >= 0, got {self.noise}")


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((rows, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> VectorDataset:
    """Classes on a sphere, appearance modes offset around each class center.

    Samples are ordered class-major, then mode, then sample; mode ids are
    class-local (``0..modes-1``).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    class_centers = _unit_rows(rng, spec.classes, spec.dim) * spec.class_radius
    offsets = _unit_rows(rng, spec.classes * spec.modes, spec.dim) * spec.mode_radius
    mode_centers = np.repeat(class_centers, spec.modes, axis=0) + offsets
    centers = np.repeat(mode_centers, spec.per_mode, axis=0)
    features = centers + rng.standard_normal(centers.shape) * spec.noise

    labels = np.repeat(np.arange(spec.classes), spec.modes * spec.per_mode)
    modes = np.tile(np.repeat(np.arange(spec.modes), spec.per_mode), spec.classes)
    note = (
        f"synthetic classes={spec.classes} modes={spec.modes} dim={spec.dim} per_mode={spec.per_mode} "
        f"class_radius={spec.class_radius} mode_radius={spec.mode_radius} noise={spec.noise} seed={spec.seed}"
    )
    return VectorDataset(features=features, labels=labels, modes=modes, provenance=note)


def split_dataset(ds: VectorDataset, test_fraction: float, seed: int) -> Tuple[VectorDataset, VectorDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise BadShape(f"test fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(ds.n)
    cut = int(round(ds.n * (1.0 - test_fraction)))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


# files


def _write(path: str | Path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc


def _parse_header(blob: bytes, magic: bytes, path: str | Path) -> Tuple[int, int, int]:
    if len(blob) < _HEADER.size:
        raise CorruptFileError(f"{path}: file shorter than header")
    got_magic, version, n, d, flags = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise FormatVersionError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported version {version}")
    return n, d, flags


def write_dataset(ds: VectorDataset, path: str | Path) -> None:
    flags = FLAG_HAS_MODES if ds.has_modes else 0
    parts = [
        _HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, ds.n, ds.d, flags),
        ds.features.astype("<f4").tobytes(),
        ds.labels.astype("<i4").tobytes(),
    ]
    if ds.modes is not None:
        parts.append(ds.modes.astype("<i4").tobytes())
    _write(path, b"".join(parts))


def read_dataset(path: str | Path) -> VectorDataset:
    blob = _read(path)
    n, d, flags = _parse_header(blob, DATASET_MAGIC, path)
    has_modes = bool(flags & FLAG_HAS_MODES)
    expected = _HEADER.size + 4 * n * d + 4 * n * (2 if has_modes else 1)
    if len(blob) != expected:
        raise CorruptFileError(f"{path}: header promises {expected} bytes, file has {len(blob)}")
    offset = _HEADER.size
    features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += 4 * n * d
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=offset)
    offset += 4 * n
    modes = np.frombuffer(blob, dtype="<i4", count=n, offset=offset) if has_modes else None
    return VectorDataset(
        features=features.astype(np.float32),
        labels=labels.astype(np.int32),
        modes=None if modes is None else modes.astype(np.int32),
        provenance=str(path),
    )


def write_embeddings(values: np.ndarray | EmbeddingMatrix, path: str | Path) -> None:
    rows = values.values if isinstance(values, EmbeddingMatrix) else np.asarray(values)
    if rows.ndim != 2:
        raise BadShape(f"embeddings must be 2-d, got shape {rows.shape}")
    n, d = rows.shape
    _write(path, _HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, n, d, 0) + rows.astype("<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    """Rows as float64 (widened from the on-disk float32)."""
    blob = _read(path)
    n, d, _ = _parse_header(blob, EMBEDDING_MAGIC, path)
    expected = _HEADER.size + 4 * n * d
    if len(blob) != expected:
        raise CorruptFileError(f"{path}: header promises {expected} bytes, file has {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size).astype(np.float64).reshape(n, d)
