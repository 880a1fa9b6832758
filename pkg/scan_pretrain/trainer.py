from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import DEFAULT_BANK_CAPACITY, MemoryBank
from .data_io import VectorDataset
from .encoder import (
    DEFAULT_ENCODER_MOMENTUM,
    MomentumPair,
    backward,
    forward,
    init_params,
    momentum_update,
)
from .errors import BadShape, ConfigError, DimensionMismatch, FileIoError, ShapeMismatch, TableMismatch
from .losses import DEFAULT_TEMPERATURE, LossConfig, PseudoLabeledBatch, get_objective
from .mining import NeighborTable

logger = logging.getLogger(__name__)

MODES = ("moco", "scan", "scl")


@dataclass(frozen=True)
class AugmentStrengths:
    scale_jitter: float = 0.1
    noise: float = 0.05
    drop_prob: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    queries: int = 128
    k: int = 2
    tau: float = DEFAULT_TEMPERATURE
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    bank_size: int = DEFAULT_BANK_CAPACITY
    bank_init: str = "random"
    encoder_momentum: float = DEFAULT_ENCODER_MOMENTUM
    scale_jitter: float = 0.1
    noise: float = 0.05
    drop_prob: float = 0.1
    hidden: Tuple[int, ...] = (128,)
    embed_dim: int = 32
    denominator: str = "paper"
    mode: str = "scan"
    seed: int = 0

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @property
    def strengths(self) -> AugmentStrengths:
        return AugmentStrengths(self.scale_jitter, self.noise, self.drop_prob)

    @property
    def effective_k(self) -> int:
        return self.k if self.mode == "scan" else 0

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got '{self.mode}'")
        if self.queries < 1:
            raise ConfigError(f"queries must be >= 1, got {self.queries}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("tau", "lr"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigError(f"{name} must be > 0, got {value}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("sgd_momentum", "encoder_momentum", "drop_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.scale_jitter < 0 or self.noise < 0:
            raise ConfigError("augmentation strengths must be >= 0")
        if self.bank_init not in ("random", "empty"):
            raise ConfigError(f"bank_init must be random or empty, got '{self.bank_init}'")
        if self.denominator not in ("paper", "infonce"):
            raise ConfigError(f"denominator must be paper or infonce, got '{self.denominator}'")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer sizes must be >= 1")
        batch_rows = self.queries * (1 + self.effective_k)
        if self.bank_size < batch_rows:
            raise ConfigError(
                f"bank_size {self.bank_size} cannot hold one batch of keys ({batch_rows} rows)"
            )


@dataclass(eq=False)
class GroupedBatch:
    source: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    pseudo_labels: np.ndarray
    anchors: np.ndarray
    class_labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.source.size)

    @property
    def num_anchors(self) -> int:
        return int(self.anchors.sum())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    bank_occupancy: int
    wall_seconds: float


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    occupancy_trace: List[int] = field(default_factory=list)
    base_lr: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        try:
            with open(path, "w", newline="", encoding="utf-8") as fp:
                writer = csv.writer(fp)
                writer.writerow(["epoch", "mean_loss", "lr", "bank_occupancy", "wall_seconds"])
                for rec in self.epochs:
                    writer.writerow([rec.epoch, repr(rec.mean_loss), repr(rec.lr), rec.bank_occupancy, f"{rec.wall_seconds:.3f}"])
        except OSError as exc:
            raise FileIoError(str(path), str(exc)) from exc


def augment(x: np.ndarray, strengths: AugmentStrengths, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative jitter, additive noise, then random coordinate zeroing.

    Works on a single vector or a batch of rows; always draws the same amount
    of randomness for a given shape.
    """
    x = np.asarray(x, dtype=np.float64)
    jitter = rng.normal(0.0, strengths.scale_jitter, x.shape)
    noise = rng.normal(0.0, strengths.noise, x.shape)
    keep = rng.random(x.shape) >= strengths.drop_prob
    return (x * (1.0 + jitter) + noise) * keep


def sample_batch(
    dataset: VectorDataset,
    neighbor_table: Optional[NeighborTable],
    S: int,
    K: int,
    rng: np.random.Generator,
    strengths: AugmentStrengths = AugmentStrengths(),
    anchors: Optional[Sequence[int]] = None,
) -> GroupedBatch:
    if neighbor_table is not None and neighbor_table.n != dataset.n:
        raise TableMismatch(neighbor_table.n, dataset.n)
    if K > 0:
        if neighbor_table is None:
            raise BadShape(f"K={K} needs a neighbor table")
        if neighbor_table.k < K:
            raise BadShape(f"table mined with k={neighbor_table.k}, batch asks for K={K}")
    if anchors is None:
        anchors = rng.choice(dataset.n, size=min(S, dataset.n), replace=False)

    sources: List[np.ndarray] = []
    groups: List[np.ndarray] = []
    for group, anchor in enumerate(np.asarray(anchors, dtype=np.int64)):
        pulled = neighbor_table.neighbors(int(anchor), K) if K > 0 else np.empty(0, dtype=np.int64)
        members = np.concatenate([[anchor], pulled]).astype(np.int64)
        sources.append(members)
        groups.append(np.full(members.size, group, dtype=np.int64))

    source = np.concatenate(sources)
    is_anchor = np.zeros(source.size, dtype=bool)
    is_anchor[np.cumsum([0] + [m.size for m in sources[:-1]])] = True
    rows = dataset.features[source].astype(np.float64)
    return GroupedBatch(
        source=source,
        view_a=augment(rows, strengths, rng),
        view_b=augment(rows, strengths, rng),
        pseudo_labels=np.concatenate(groups),
        anchors=is_anchor,
        class_labels=dataset.labels[source].astype(np.int64),
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def sgd_step(
    params: List[np.ndarray],
    grads: List[np.ndarray],
    velocity: List[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    if not len(params) == len(grads) == len(velocity):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads, {len(velocity)} velocity buffers")
    for theta, grad, v in zip(params, grads, velocity):
        if not theta.shape == grad.shape == v.shape:
            raise ShapeMismatch(f"param {theta.shape}, grad {grad.shape}, velocity {v.shape}")
    for theta, grad, v in zip(params, grads, velocity):
        v *= momentum
        v += grad + weight_decay * theta
        theta -= lr * v


def _initial_pair(dataset: VectorDataset, config: TrainConfig, init: Optional[MomentumPair]) -> MomentumPair:
    if init is None:
        sizes = (dataset.d, *config.hidden, config.embed_dim)
        return MomentumPair.from_query(init_params(sizes, config.seed), config.encoder_momentum)
    if init.query.input_dim != dataset.d:
        raise DimensionMismatch(init.query.input_dim, dataset.d, "checkpoint input dimension")
    # inherit both branches, but train with this run's momentum coefficient
    return MomentumPair(query=init.query.copy(), key=init.key.copy(), m=config.encoder_momentum)


def pretrain(
    dataset: VectorDataset,
    neighbor_table: Optional[NeighborTable],
    config: TrainConfig,
    init: Optional[MomentumPair] = None,
    workers: int = 1,
) -> Tuple[MomentumPair, TrainingLog]:
    """Run contrastive pre-training in ``config.mode``; deterministic per seed.

    With ``workers > 1`` the key-encoder forward runs on a worker thread while
    the query forward runs on the caller; results do not depend on it.
    """
    config.validate()
    if config.mode == "scan" and neighbor_table is None:
        raise ConfigError("scan mode requires a neighbor table")
    if neighbor_table is not None and neighbor_table.n != dataset.n:
        raise TableMismatch(neighbor_table.n, dataset.n)

    pair = _initial_pair(dataset, config, init)
    log = TrainingLog(base_lr=config.lr)
    if config.epochs == 0 or dataset.n == 0:
        return pair, log

    rng = np.random.default_rng(config.seed)
    bank = MemoryBank(config.bank_size, pair.query.output_dim, init=config.bank_init, seed=config.seed + 1)  # type: ignore[arg-type]
    objective = get_objective(config.mode)
    loss_cfg = LossConfig(config.denominator)  # type: ignore[arg-type]
    strengths = config.strengths
    K = config.effective_k
    velocity = [np.zeros_like(t) for t in pair.query.tensors()]

    steps_per_epoch = math.ceil(dataset.n / config.queries)
    total_steps = config.epochs * steps_per_epoch
    logger.info(
        "pretrain mode=%s n=%d S=%d K=%d tau=%g lr=%g epochs=%d steps=%d bank=%d(%s)",
        config.mode, dataset.n, config.queries, K, config.tau, config.lr,
        config.epochs, total_steps, config.bank_size, config.bank_init,
    )

    step = 0
    pool = ThreadPoolExecutor(max_workers=1) if workers > 1 else None
    with pool if pool is not None else nullcontext():
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            epoch_lr = cosine_lr(step, total_steps, config.lr)
            order = rng.permutation(dataset.n)
            losses: List[float] = []
            for start in range(0, dataset.n, config.queries):
                batch = sample_batch(
                    dataset, neighbor_table, config.queries, K, rng, strengths,
                    anchors=order[start:start + config.queries],
                )
                key_job = pool.submit(forward, pair.key, batch.view_b) if pool is not None else None
                f_emb, f_cache = forward(pair.query, batch.view_a)
                g_emb, _ = key_job.result() if key_job is not None else forward(pair.key, batch.view_b)
                out = objective(
                    PseudoLabeledBatch(
                        f_embeddings=f_emb.values,
                        g_embeddings=g_emb.values,
                        pseudo_labels=batch.pseudo_labels,
                        anchors=batch.anchors,
                        class_labels=batch.class_labels,
                    ),
                    bank.negatives_view(),
                    config.tau,
                    loss_cfg,
                )
                grads = backward(pair.query, f_cache, out.grad_f)
                lr = cosine_lr(step, total_steps, config.lr)
                sgd_step(pair.query.tensors(), grads, velocity, lr, config.sgd_momentum, config.weight_decay)
                pair.query.touch()
                momentum_update(pair)
                bank.enqueue(g_emb.values)

                losses.append(out.loss)
                log.occupancy_trace.append(bank.occupancy)
                logger.debug("step %d loss=%.6f lr=%.6f batch=%d", step, out.loss, lr, batch.size)
                step += 1

            record = EpochRecord(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                lr=epoch_lr,
                bank_occupancy=bank.occupancy,
                wall_seconds=time.perf_counter() - started,
            )
            log.epochs.append(record)
            logger.info(
                "epoch %d/%d loss=%.5f lr=%.5f bank=%d (%.2fs)",
                epoch, config.epochs, record.mean_loss, record.lr, record.bank_occupancy, record.wall_seconds,
            )
    return pair, log


def config_echo(config: TrainConfig) -> Dict[str, Any]:
    echo: Dict[str, Any] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        echo[f.name] = list(value) if isinstance(value, tuple) else value
    return echo
