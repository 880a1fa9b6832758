"""MLP encoder with hand-derived backpropagation and the momentum key encoder.

Layout: ``h_0 = x``; ``z_l = h_{l-1} @ W_l + b_l``; ``h_l = relu(z_l)`` on hidden
layers; the last affine output is row-normalized and is the embedding.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import (
    BadShape,
    CorruptFileError,
    DimensionMismatch,
    FileIoError,
    FormatVersionError,
    StaleCache,
)

CHECKPOINT_MAGIC = b"SCNC"
CHECKPOINT_VERSION = 1
DEFAULT_ENCODER_MOMENTUM = 0.99
ZERO_NORM = 1e-12

_param_ids = count()


@dataclass(eq=False)
class EncoderParams:
    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    uid: int = field(default_factory=lambda: next(_param_ids))
    version: int = 0

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> List[np.ndarray]:
        """Parameters in canonical order: W_1, b_1, W_2, b_2, ..."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def touch(self) -> None:
        """Mark in-place mutation; caches from earlier forwards go stale."""
        self.version += 1

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            layer_sizes=self.layer_sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def same_shapes(self, other: "EncoderParams") -> bool:
        return self.layer_sizes == other.layer_sizes


@dataclass(eq=False)
class ForwardCache:
    params_uid: int
    params_version: int
    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass(eq=False)
class MomentumPair:
    query: EncoderParams
    key: EncoderParams
    m: float = DEFAULT_ENCODER_MOMENTUM

    @classmethod
    def from_query(cls, params: EncoderParams, m: float = DEFAULT_ENCODER_MOMENTUM) -> "MomentumPair":
        if not 0.0 <= m <= 1.0:
            raise BadShape(f"momentum coefficient must be in [0, 1], got {m}")
        return cls(query=params, key=params.copy(), m=m)


@dataclass(frozen=True)
class GradientCheckReport:
    max_relative_error: float
    per_tensor: Tuple[float, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def init_params(layer_sizes: Sequence[int], seed: int) -> EncoderParams:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise BadShape(f"need an input size and at least one layer, got {list(sizes)}")
    if any(s < 1 for s in sizes):
        raise BadShape(f"layer sizes must be >= 1, got {list(sizes)}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in) for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    return EncoderParams(layer_sizes=sizes, weights=weights, biases=biases)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _unit_rows(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalize ``h``; a (near) zero row maps to the first basis vector.

    Returned norms are 0 on those rows, which :func:`backward` reads as a
    locally constant output.
    """
    norms = np.sqrt((h * h).sum(axis=1))
    dead = norms <= ZERO_NORM
    safe = np.where(dead, 1.0, norms)
    y = h / safe[:, None]
    if dead.any():
        y[dead] = 0.0
        y[dead, 0] = 1.0
    return y, np.where(dead, 0.0, norms)


def forward(params: EncoderParams, batch: np.ndarray) -> Tuple[EmbeddingMatrix, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise DimensionMismatch(params.input_dim, x.shape[1], "input dimension")

    activations = [x]
    pre_activations: List[np.ndarray] = []
    h = x
    last = params.num_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre_activations.append(z)
        h = z if layer == last else _relu(z)
        if layer != last:
            activations.append(h)

    y, norms = _unit_rows(h)
    cache = ForwardCache(
        params_uid=params.uid,
        params_version=params.version,
        activations=activations,
        pre_activations=pre_activations,
        norms=norms,
        embeddings=y,
    )
    return EmbeddingMatrix(y, normalized=True), cache


def penultimate(params: EncoderParams, batch: np.ndarray) -> EmbeddingMatrix:
    """Normalized last hidden activation (probe features); falls back to the output for 1-layer nets."""
    _, cache = forward(params, batch)
    if params.num_layers == 1:
        return EmbeddingMatrix(cache.embeddings, normalized=True)
    return EmbeddingMatrix(_unit_rows(cache.activations[-1])[0], normalized=True)


def backward(params: EncoderParams, cache: ForwardCache, grad_wrt_embeddings: np.ndarray) -> List[np.ndarray]:
    """Gradients in :meth:`EncoderParams.tensors` order."""
    if cache.params_uid != params.uid or cache.params_version != params.version:
        raise StaleCache("forward cache does not belong to the current parameters")
    g = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    y = cache.embeddings
    if g.shape != y.shape:
        raise DimensionMismatch(y.shape[1], g.shape[-1], "gradient shape")

    # Jacobian of h / |h|: (g - y (y.g)) / |h|; zero on rows that collapsed
    radial = (g * y).sum(axis=1, keepdims=True)
    live = cache.norms > 0.0
    scale = np.divide(1.0, cache.norms, out=np.zeros_like(cache.norms), where=live)
    delta = (g - y * radial) * scale[:, None]

    grads: List[np.ndarray] = [np.empty(0)] * (2 * params.num_layers)
    for layer in range(params.num_layers - 1, -1, -1):
        h_in = cache.activations[layer]
        grads[2 * layer] = h_in.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer:
            delta = (delta @ params.weights[layer].T) * (cache.pre_activations[layer - 1] > 0.0)
    return grads


def momentum_update(pair: MomentumPair) -> None:
    m = pair.m
    for target, source in zip(pair.key.tensors(), pair.query.tensors()):
        target *= m
        target += (1.0 - m) * source
    pair.key.touch()


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]
BackwardFn = Callable[[EncoderParams, ForwardCache, np.ndarray], List[np.ndarray]]


def gradient_check(
    params: EncoderParams,
    inputs: np.ndarray,
    loss_fn: LossFn,
    tolerance: float = 1e-5,
    step: float = 1e-5,
    backward_fn: Optional[BackwardFn] = None,
) -> GradientCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` maps normalized embeddings to ``(loss, d loss / d embeddings)``.
    The relative error of a tensor is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    backward_fn = backward_fn or backward
    emb, cache = forward(params, inputs)
    _, upstream = loss_fn(emb.values)
    analytic = backward_fn(params, cache, upstream)

    errors: List[float] = []
    for tensor, grad in zip(params.tensors(), analytic):
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus, _ = loss_fn(forward(params, inputs)[0].values)
            flat[i] = original - step
            minus, _ = loss_fn(forward(params, inputs)[0].values)
            flat[i] = original
            num_flat[i] = (plus - minus) / (2.0 * step)
        scale = max(float(np.max(np.abs(grad), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
        errors.append(float(np.max(np.abs(grad - numeric), initial=0.0)) / scale)
    return GradientCheckReport(max_relative_error=max(errors), per_tensor=tuple(errors), tolerance=tolerance)


# checkpoints


def save_checkpoint(pair: MomentumPair, path: str | Path) -> None:
    sizes = pair.query.layer_sizes
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<BI", CHECKPOINT_VERSION, len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
        struct.pack("<d", pair.m),
    ]
    for params in (pair.query, pair.key):
        for tensor in params.tensors():
            chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc


def load_checkpoint(path: str | Path) -> MomentumPair:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileIoError(str(path), str(exc)) from exc
    if len(blob) < 9 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatVersionError(f"{path}: not an encoder checkpoint")
    version, count_sizes = struct.unpack_from("<BI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: unsupported checkpoint version {version}")
    offset = 9
    need = offset + 4 * count_sizes + 8
    if len(blob) < need or count_sizes < 2:
        raise CorruptFileError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{count_sizes}I", blob, offset)
    offset += 4 * count_sizes
    (m,) = struct.unpack_from("<d", blob, offset)
    offset += 8

    shapes: List[Tuple[int, ...]] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes.extend(((fan_in, fan_out), (fan_out,)))
    total = 2 * sum(int(np.prod(s)) for s in shapes) * 8
    if len(blob) - offset != total:
        raise CorruptFileError(f"{path}: expected {total} parameter bytes, found {len(blob) - offset}")

    branches: List[EncoderParams] = []
    for _ in range(2):
        tensors: List[np.ndarray] = []
        for shape in shapes:
            size = int(np.prod(shape))
            tensors.append(np.frombuffer(blob, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape))
            offset += size * 8
        branches.append(EncoderParams(layer_sizes=tuple(sizes), weights=tensors[0::2], biases=tensors[1::2]))
    return MomentumPair(query=branches[0], key=branches[1], m=m)
