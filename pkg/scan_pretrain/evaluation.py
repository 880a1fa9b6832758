"""Frozen-embedding probes and retrieval purity reports."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .embedding import EmbeddingMatrix, LabelVector, require_normalized, row_dots
from .errors import BadShape, EmptyTrainSet, FileIoError, IndexOutOfRange, LabelMismatch, NotConverged

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_KNN_K = 20
DEFAULT_RETRIEVAL_K = 3
TOP5 = 5


@dataclass(frozen=True)
class ProbeConfig:
    knn_k: int = DEFAULT_KNN_K
    retrieval_k: int = DEFAULT_RETRIEVAL_K
    learning_rate: float = 1.0
    l2: float = 1e-4
    tolerance: float = 1e-6
    max_iterations: int = 1000


@dataclass
class ProbeResult:
    probe: str
    accuracy: float
    top5: float
    converged: bool = True
    iterations: int = 0
    degenerate: bool = False
    objective_trace: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out.pop("objective_trace")
        if self.objective_trace:
            out["final_objective"] = self.objective_trace[-1]
        return out


@dataclass
class PurityReport:
    k: int
    queries: np.ndarray
    retrieved: np.ndarray
    class_purity: np.ndarray
    mode_purity: Optional[np.ndarray]
    joint_purity: Optional[np.ndarray]

    @property
    def mean_class_purity(self) -> float:
        return float(self.class_purity.mean()) if self.class_purity.size else 0.0

    @property
    def mean_mode_purity(self) -> Optional[float]:
        if self.mode_purity is None:
            return None
        return float(self.mode_purity.mean()) if self.mode_purity.size else 0.0

    @property
    def mean_joint_purity(self) -> Optional[float]:
        if self.joint_purity is None:
            return None
        return float(self.joint_purity.mean()) if self.joint_purity.size else 0.0

    def summary(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "queries": int(self.queries.size),
            "class_purity": self.mean_class_purity,
            "mode_purity": self.mean_mode_purity,
            "joint_purity": self.mean_joint_purity,
        }

    def rows(self) -> List[Dict[str, Any]]:
        out: List[Dict[str, Any]] = []
        for i, query in enumerate(self.queries):
            row: Dict[str, Any] = {
                "query": int(query),
                "retrieved": " ".join(str(int(r)) for r in self.retrieved[i]),
                "class_purity": float(self.class_purity[i]),
            }
            if self.mode_purity is not None and self.joint_purity is not None:
                row["mode_purity"] = float(self.mode_purity[i])
                row["joint_purity"] = float(self.joint_purity[i])
            out.append(row)
        return out


def _unit_values(values: EmbeddingMatrix | np.ndarray, what: str) -> np.ndarray:
    if isinstance(values, EmbeddingMatrix):
        return require_normalized(values).values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise BadShape(f"{what} must be 2-d, got shape {arr.shape}")
    if arr.shape[0] == 0:
        return arr
    return require_normalized(EmbeddingMatrix(arr)).values


def _labels(labels: LabelVector | np.ndarray, rows: int) -> np.ndarray:
    arr = labels.labels if isinstance(labels, LabelVector) else np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size != rows:
        raise LabelMismatch(int(arr.size), rows)
    return arr.astype(np.int64)


def nearest(gallery: np.ndarray, query: np.ndarray, k: int, exclude: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Top-``k`` gallery rows by cosine, ties to the lower index."""
    scores = row_dots(gallery, query)
    candidates = np.arange(gallery.shape[0])
    if exclude is not None:
        keep = candidates != exclude
        candidates, scores = candidates[keep], scores[keep]
    order = np.lexsort((candidates, -scores))[:k]
    return candidates[order], scores[order]


def _per_row(fn: Callable[[int], T], count: int, workers: int) -> List[T]:
    """``[fn(i) for i in range(count)]`` spread over ``workers`` threads, in order."""
    if workers <= 1 or count < 2:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def knn_probe(
    train_embs: EmbeddingMatrix | np.ndarray,
    train_labels: LabelVector | np.ndarray,
    test_embs: EmbeddingMatrix | np.ndarray,
    test_labels: LabelVector | np.ndarray,
    k: int = DEFAULT_KNN_K,
    workers: int = 1,
) -> ProbeResult:
    """Cosine k-NN majority vote; vote ties go to the lowest class id."""
    if k < 1:
        raise BadShape(f"k must be >= 1, got {k}")
    train = _unit_values(train_embs, "train embeddings")
    if train.shape[0] == 0:
        raise EmptyTrainSet("k-NN probe needs at least one training row")
    test = _unit_values(test_embs, "test embeddings")
    y_train = _labels(train_labels, train.shape[0])
    y_test = _labels(test_labels, test.shape[0])
    if test.shape[0] == 0:
        return ProbeResult(probe="knn", accuracy=0.0, top5=0.0)

    num_classes = int(max(y_train.max(), y_test.max())) + 1
    votes = np.zeros((test.shape[0], num_classes), dtype=np.int64)
    picks = _per_row(lambda row: nearest(train, test[row], k)[0], test.shape[0], workers)
    for row, picked in enumerate(picks):
        np.add.at(votes[row], y_train[picked], 1)

    ranked = np.argsort(-votes, axis=1, kind="stable")
    accuracy = float(np.mean(ranked[:, 0] == y_test))
    top5 = float(np.mean((ranked[:, :TOP5] == y_test[:, None]).any(axis=1)))
    logger.info("k-NN probe k=%d train=%d test=%d top1=%.4f top5=%.4f", k, train.shape[0], test.shape[0], accuracy, top5)
    return ProbeResult(probe="knn", accuracy=accuracy, top5=top5)


def _softmax_objective(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray, l2: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    rows = np.arange(x.shape[0])
    value = float(np.mean(log_z - logits[rows, y]) + 0.5 * l2 * np.sum(w * w))
    probs = np.exp(logits - log_z[:, None])
    probs[rows, y] -= 1.0
    probs /= x.shape[0]
    return value, x.T @ probs + l2 * w, probs.sum(axis=0)


def linear_probe(
    train_embs: EmbeddingMatrix | np.ndarray,
    train_labels: LabelVector | np.ndarray,
    test_embs: EmbeddingMatrix | np.ndarray,
    test_labels: LabelVector | np.ndarray,
    config: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    A step that would raise the objective is retried at half the rate, so the
    objective trace never increases. Stopping at ``max_iterations`` issues a
    :class:`NotConverged` warning.
    """
    x = train_embs.values if isinstance(train_embs, EmbeddingMatrix) else np.asarray(train_embs, dtype=np.float64)
    x_test = test_embs.values if isinstance(test_embs, EmbeddingMatrix) else np.asarray(test_embs, dtype=np.float64)
    if x.ndim != 2 or x_test.ndim != 2:
        raise BadShape("probe inputs must be 2-d")
    if x.shape[0] == 0:
        raise EmptyTrainSet("linear probe needs at least one training row")
    if x_test.shape[1] != x.shape[1]:
        raise BadShape(f"train/test widths differ: {x.shape[1]} vs {x_test.shape[1]}")
    y_raw = _labels(train_labels, x.shape[0])
    y_test = _labels(test_labels, x_test.shape[0])

    classes, y = np.unique(y_raw, return_inverse=True)
    if classes.size == 1:
        hit = float(np.mean(y_test == classes[0])) if y_test.size else 0.0
        return ProbeResult(probe="linear", accuracy=hit, top5=hit, degenerate=True)

    w = np.zeros((x.shape[1], classes.size))
    b = np.zeros(classes.size)
    value, grad_w, grad_b = _softmax_objective(x, y, w, b, config.l2)
    trace = [value]
    lr = config.learning_rate
    converged = False
    iterations = 0
    while iterations < config.max_iterations:
        if np.sqrt(np.sum(grad_w * grad_w) + np.sum(grad_b * grad_b)) <= config.tolerance:
            converged = True
            break
        while True:
            w_next, b_next = w - lr * grad_w, b - lr * grad_b
            next_value, next_gw, next_gb = _softmax_objective(x, y, w_next, b_next, config.l2)
            if next_value <= value:
                break
            lr /= 2.0
            if lr < 1e-16:
                break
        if next_value > value:
            logger.debug("linear probe line search stalled at iteration %d", iterations)
            break
        w, b, value, grad_w, grad_b = w_next, b_next, next_value, next_gw, next_gb
        trace.append(value)
        iterations += 1
        lr = min(2.0 * lr, config.learning_rate)

    if not converged:
        warnings.warn(
            f"linear probe stopped after {iterations} iterations above tolerance {config.tolerance}",
            NotConverged,
            stacklevel=2,
        )
        logger.warning("linear probe did not converge (%d iterations, objective %.6f)", iterations, value)

    if y_test.size == 0:
        return ProbeResult("linear", 0.0, 0.0, converged, iterations, False, trace)
    ranked = classes[np.argsort(-(x_test @ w + b), axis=1, kind="stable")]
    accuracy = float(np.mean(ranked[:, 0] == y_test))
    top5 = float(np.mean((ranked[:, :TOP5] == y_test[:, None]).any(axis=1)))
    logger.info("linear probe classes=%d iterations=%d top1=%.4f top5=%.4f", classes.size, iterations, accuracy, top5)
    return ProbeResult("linear", accuracy, top5, converged, iterations, False, trace)


def retrieval_report(
    gallery_embs: EmbeddingMatrix | np.ndarray,
    labels: LabelVector,
    queries: Optional[Sequence[int]] = None,
    k: int = DEFAULT_RETRIEVAL_K,
    workers: int = 1,
) -> PurityReport:
    gallery = _unit_values(gallery_embs, "gallery")
    n = gallery.shape[0]
    y = _labels(labels, n)
    modes = labels.modes if labels.has_modes else None
    if k < 1:
        raise BadShape(f"k must be >= 1, got {k}")
    picked_queries = np.arange(n) if queries is None else np.asarray(queries, dtype=np.int64).reshape(-1)
    for q in picked_queries:
        if not 0 <= q < n:
            raise IndexOutOfRange(int(q), n)

    width = min(k, max(n - 1, 0))
    retrieved = np.zeros((picked_queries.size, width), dtype=np.int64)
    def lookup(row: int) -> np.ndarray:
        q = int(picked_queries[row])
        return nearest(gallery, gallery[q], width, exclude=q)[0]

    for row, picked in enumerate(_per_row(lookup, picked_queries.size, workers)):
        retrieved[row] = picked

    denom = max(width, 1)
    same_class = y[retrieved] == y[picked_queries][:, None]
    class_purity = same_class.sum(axis=1) / denom
    mode_purity = joint_purity = None
    if modes is not None:
        # mode ids are class-local: a latent mode is a (class, mode) pair
        same_mode = same_class & (modes[retrieved] == modes[picked_queries][:, None])
        mode_purity = same_mode.sum(axis=1) / denom
        joint_purity = mode_purity.copy()
    report = PurityReport(width, picked_queries, retrieved, class_purity, mode_purity, joint_purity)
    logger.info(
        "retrieval k=%d queries=%d class=%.4f mode=%s joint=%s",
        width, picked_queries.size, report.mean_class_purity, report.mean_mode_purity, report.mean_joint_purity,
    )
    return report


# reports


def write_report_csv(report: PurityReport, path: str | Path) -> None:
    rows = report.rows()
    columns = ["query", "retrieved", "class_purity"]
    if report.mode_purity is not None:
        columns += ["mode_purity", "joint_purity"]
    try:
        with open(path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.DictWriter(fp, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc


def write_summary_json(summary: Dict[str, Any], path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc
