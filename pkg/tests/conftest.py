from __future__ import annotations

import numpy as np
import pytest

from scan_pretrain.data_io import SyntheticSpec, VectorDataset, generate_synthetic
from scan_pretrain.embedding import EmbeddingMatrix, LabelVector, l2_normalize_rows
from scan_pretrain.mining import NeighborTable, mine_fast
from scan_pretrain.trainer import TrainConfig


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(classes=3, modes=2, dim=8, per_mode=10, seed=5)


@pytest.fixture
def tiny_dataset(tiny_spec: SyntheticSpec) -> VectorDataset:
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_table(tiny_dataset: VectorDataset) -> NeighborTable:
    appearance = l2_normalize_rows(EmbeddingMatrix(tiny_dataset.features))
    return mine_fast(appearance, LabelVector(tiny_dataset.labels, tiny_dataset.modes), 2)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        queries=16,
        k=2,
        epochs=2,
        bank_size=64,
        hidden=(16,),
        embed_dim=8,
        seed=3,
    )
