"""Neighbor-count sweep on the synthetic class/mode benchmark.

For every seed: generate, split, bootstrap a MoCo encoder, mine once at the
largest K, then train SCAN for each K > 0 (K = 0 is the bootstrap itself) and
an SCL reference, and score each encoder with both probes and retrieval purity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Sequence

import numpy as np

from .data_io import SyntheticSpec, VectorDataset, generate_synthetic, split_dataset
from .embedding import LabelVector
from .encoder import MomentumPair, forward
from .errors import ConfigError
from .evaluation import ProbeConfig, knn_probe, linear_probe, retrieval_report
from .mining import mine_fast
from .trainer import TrainConfig, config_echo, pretrain

logger = logging.getLogger(__name__)

DEFAULT_KS = (0, 2, 8)
DEFAULT_SEEDS = (0, 1, 2)
SCL_RUN = "scl"


@dataclass
class SweepResult:
    runs: List[Dict[str, Any]] = field(default_factory=list)
    means: Dict[str, Dict[str, float]] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)

    def summary(self) -> Dict[str, Any]:
        return {"settings": self.settings, "runs": self.runs, "means": self.means, "checks": self.checks}


def run_name(k: int) -> str:
    return "moco" if k == 0 else f"scan_k{k}"


def evaluate_encoder(
    pair: MomentumPair,
    train: VectorDataset,
    test: VectorDataset,
    probe: ProbeConfig = ProbeConfig(),
    workers: int = 1,
) -> Dict[str, float]:
    train_embs, _ = forward(pair.query, train.features)
    test_embs, _ = forward(pair.query, test.features)
    knn = knn_probe(train_embs, train.labels, test_embs, test.labels, probe.knn_k, workers=workers)
    linear = linear_probe(train_embs, train.labels, test_embs, test.labels, probe)
    purity = retrieval_report(test_embs, LabelVector(test.labels, test.modes), k=probe.retrieval_k, workers=workers)
    return {
        "knn_top1": knn.accuracy,
        "knn_top5": knn.top5,
        "linear_top1": linear.accuracy,
        "linear_top5": linear.top5,
        "linear_converged": float(linear.converged),
        "class_purity": purity.mean_class_purity,
        "mode_purity": purity.mean_mode_purity or 0.0,
        "joint_purity": purity.mean_joint_purity or 0.0,
    }


def _directional_checks(means: Dict[str, Dict[str, float]]) -> Dict[str, bool]:
    checks: Dict[str, bool] = {}
    moco, scan2, scl = means.get("moco"), means.get("scan_k2"), means.get(SCL_RUN)
    if moco and scan2:
        checks["knn_k2_ge_k0"] = scan2["knn_top1"] >= moco["knn_top1"]
        checks["linear_k2_ge_k0"] = scan2["linear_top1"] >= moco["linear_top1"]
        checks["joint_k2_gt_class_k0"] = scan2["joint_purity"] > moco["class_purity"]
    if scan2 and scl:
        checks["joint_k2_gt_joint_scl"] = scan2["joint_purity"] > scl["joint_purity"]
    return checks


def run_sweep(
    spec: SyntheticSpec = SyntheticSpec(),
    base: TrainConfig = TrainConfig(),
    ks: Sequence[int] = DEFAULT_KS,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    probe: ProbeConfig = ProbeConfig(),
    test_fraction: float = 0.2,
    include_scl: bool = True,
    inherit: bool = False,
    workers: int = 1,
) -> SweepResult:
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 0:
        raise ConfigError(f"sweep needs non-negative K values, got {list(ks)}")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    max_k = ks[-1]

    result = SweepResult(
        settings={
            "ks": ks,
            "seeds": list(seeds),
            "test_fraction": test_fraction,
            "include_scl": include_scl,
            "inherit": inherit,
            "synthetic": {k: v for k, v in vars(spec).items() if k != "seed"},
            "train": {k: v for k, v in config_echo(base).items() if k not in ("seed", "mode", "k")},
        }
    )
    for seed in seeds:
        dataset = generate_synthetic(replace(spec, seed=seed))
        train, test = split_dataset(dataset, test_fraction, seed)
        config = replace(base, seed=seed)
        logger.info("sweep seed=%d train=%d test=%d", seed, train.n, test.n)

        bootstrap, _ = pretrain(train, None, replace(config, mode="moco"), workers=workers)
        encoders: Dict[str, MomentumPair] = {}
        if 0 in ks:
            encoders[run_name(0)] = bootstrap

        positive_ks = [k for k in ks if k > 0]
        if positive_ks:
            appearance, _ = forward(bootstrap.query, train.features)
            table = mine_fast(appearance, LabelVector(train.labels, train.modes), max_k, workers=workers)
            for k in positive_ks:
                pair, _ = pretrain(
                    train,
                    table.truncate(k),
                    replace(config, mode="scan", k=k),
                    init=bootstrap if inherit else None,
                    workers=workers,
                )
                encoders[run_name(k)] = pair
        if include_scl:
            encoders[SCL_RUN], _ = pretrain(train, None, replace(config, mode="scl"), workers=workers)

        for name, pair in encoders.items():
            metrics = evaluate_encoder(pair, train, test, probe, workers=workers)
            result.runs.append({"run": name, "seed": int(seed), **metrics})
            logger.info("sweep seed=%d %s knn=%.4f joint=%.4f", seed, name, metrics["knn_top1"], metrics["joint_purity"])

    names: List[str] = []
    for row in result.runs:
        if row["run"] not in names:
            names.append(row["run"])
    for name in names:
        rows = [row for row in result.runs if row["run"] == name]
        keys = [key for key in rows[0] if key not in ("run", "seed")]
        result.means[name] = {key: float(np.mean([row[key] for row in rows])) for key in keys}
    result.checks = _directional_checks(result.means)
    return result
