import numpy as np
import pytest

from scan_pretrain.encoder import (
    MomentumPair,
    backward,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    momentum_update,
    penultimate,
    save_checkpoint,
)
from scan_pretrain.errors import (
    BadShape,
    CorruptFileError,
    DimensionMismatch,
    FormatVersionError,
    StaleCache,
)
from scan_pretrain.losses import PseudoLabeledBatch, moco_loss, scan_loss, scl_loss

from .conftest import unit_rows


def _flat(params):
    return np.concatenate([t.reshape(-1) for t in params.tensors()])


def test_init_is_seeded():
    a, b = init_params([4, 6, 3], seed=7), init_params([4, 6, 3], seed=7)
    assert np.array_equal(_flat(a), _flat(b))
    assert not np.array_equal(_flat(a), _flat(init_params([4, 6, 3], seed=8)))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert [w.shape for w in a.weights] == [(4, 6), (6, 3)]


@pytest.mark.parametrize("sizes", [[4, 0], [4], [0, 3]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(BadShape):
        init_params(sizes, seed=0)


def test_identity_layer_returns_unit_input():
    params = init_params([3, 3], seed=0)
    params.weights[0][:] = np.eye(3)
    row = np.array([[0.0, 0.6, 0.8]])
    emb, _ = forward(params, row)
    np.testing.assert_allclose(emb.values, row, atol=1e-12)


def test_hand_computed_two_layer_net():
    params = init_params([2, 2, 2], seed=0)
    params.weights[0][:] = [[1.0, -1.0], [0.0, 1.0]]
    params.weights[1][:] = [[1.0, 0.0], [0.0, -1.0]]
    emb, cache = forward(params, np.array([[1.0, 2.0], [2.0, 1.0]]))
    # row 0: relu([1, 1]) -> [1, -1]; row 1: relu([2, -1]) = [2, 0] -> [2, 0]
    np.testing.assert_allclose(emb.values, [[2 ** -0.5, -(2 ** -0.5)], [1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(cache.activations[1], [[1.0, 1.0], [2.0, 0.0]])


def test_single_layer_hand_computed():
    params = init_params([2, 2], seed=0)
    params.weights[0][:] = [[1.0, 2.0], [3.0, 4.0]]
    emb, _ = forward(params, np.array([1.0, 1.0]))
    np.testing.assert_allclose(emb.values, [[4 / np.sqrt(52), 6 / np.sqrt(52)]], atol=1e-12)


def test_forward_outputs_unit_rows(rng):
    params = init_params([5, 8, 8, 4], seed=1)
    emb, _ = forward(params, rng.standard_normal((32, 5)) * 10)
    np.testing.assert_allclose(np.linalg.norm(emb.values, axis=1), 1.0, atol=1e-9)


def test_zero_input_row_still_gives_a_unit_row(rng):
    params = init_params([3, 4, 2], seed=0)
    inputs = np.vstack([np.zeros(3), rng.standard_normal(3)])
    emb, cache = forward(params, inputs)
    np.testing.assert_allclose(np.linalg.norm(emb.values, axis=1), 1.0, atol=1e-9)
    assert emb.values[0].tolist() == [1.0, 0.0]

    upstream = np.zeros((2, 2))
    upstream[0] = rng.standard_normal(2)
    grads = backward(params, cache, upstream)
    assert all(np.all(g == 0) for g in grads)


def test_dead_hidden_layer_still_gives_unit_rows(rng):
    params = init_params([3, 4, 2], seed=1)
    params.biases[0][:] = -100.0
    inputs = rng.standard_normal((5, 3))
    emb, cache = forward(params, inputs)
    assert np.all(cache.activations[1] == 0)
    np.testing.assert_allclose(np.linalg.norm(emb.values, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(penultimate(params, inputs).values, axis=1), 1.0, atol=1e-9)
    grads = backward(params, cache, rng.standard_normal((5, 2)))
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_forward_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        forward(init_params([5, 3], seed=0), rng.standard_normal((2, 4)))


def test_zero_upstream_gives_zero_gradients(rng):
    params = init_params([4, 5, 3], seed=2)
    _, cache = forward(params, rng.standard_normal((6, 4)))
    grads = backward(params, cache, np.zeros((6, 3)))
    assert [g.shape for g in grads] == [t.shape for t in params.tensors()]
    assert all(np.all(g == 0) for g in grads)


def test_normalization_gradient_has_no_radial_part(rng):
    params = init_params([3, 3], seed=0)
    params.weights[0][:] = np.eye(3)
    row = unit_rows(rng, 1, 3)
    _, cache = forward(params, row)
    grads = backward(params, cache, rng.standard_normal((1, 3)))
    # with identity weights the bias gradient is the gradient w.r.t. the pre-normalized row
    assert abs(float(grads[1] @ row[0])) <= 1e-12


def test_backward_rejects_stale_cache(rng):
    params = init_params([4, 3], seed=0)
    _, cache = forward(params, rng.standard_normal((2, 4)))
    params.touch()
    with pytest.raises(StaleCache):
        backward(params, cache, np.zeros((2, 3)))
    with pytest.raises(StaleCache):
        backward(params.copy(), cache, np.zeros((2, 3)))


def _scan_loss_fn(rng, rows, dim, tau=0.2):
    g = unit_rows(rng, rows, dim)
    bank = unit_rows(rng, 4, dim)
    groups = np.repeat(np.arange(rows // 2), 2)
    anchors = np.tile([True, False], rows // 2)

    def loss_fn(f):
        out = scan_loss(PseudoLabeledBatch(f, g, groups, anchors), bank, tau)
        return out.loss, out.grad_f

    return loss_fn


def _scl_loss_fn(rng, rows, dim, tau=0.2):
    g = unit_rows(rng, rows, dim)
    bank = unit_rows(rng, 3, dim)
    classes = np.arange(rows) % 2
    anchors = np.ones(rows, dtype=bool)

    def loss_fn(f):
        out = scl_loss(PseudoLabeledBatch(f, g, classes, anchors, class_labels=classes), bank, tau)
        return out.loss, out.grad_f

    return loss_fn


def _moco_loss_fn(rng, rows, dim, tau=0.2):
    g = unit_rows(rng, 1, dim)
    bank = unit_rows(rng, 5, dim)

    def loss_fn(f):
        out = moco_loss(f[0], g[0], bank, tau)
        return out.loss, out.grad_f

    return loss_fn


_LOSSES = {"scan": (_scan_loss_fn, 6), "scl": (_scl_loss_fn, 4), "moco": (_moco_loss_fn, 1)}


def _tiny_encoder(seed, rows):
    """Draw a net and inputs whose hidden units sit clear of the ReLU kink.

    Finite differences are only meaningful away from kinks and from output
    rows near zero norm, so unlucky draws are redrawn.
    """
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        depth = 1 + seed % 3
        dim = int(rng.integers(2, 9))
        sizes = [4] + [int(rng.integers(3, 8)) for _ in range(depth - 1)] + [dim]
        params = init_params(sizes, seed=int(rng.integers(2**31)))
        inputs = rng.standard_normal((rows, 4))
        _, cache = forward(params, inputs)
        margin = min((float(np.abs(z).min()) for z in cache.pre_activations[:-1]), default=1.0)
        if margin > 1e-3 and cache.norms.min() > 0.5:
            return params, inputs, dim, rng
    raise AssertionError(f"no well-conditioned draw for seed {seed}")


@pytest.mark.parametrize("loss_name", sorted(_LOSSES))
@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(loss_name, seed):
    make_loss, rows = _LOSSES[loss_name]
    params, inputs, dim, rng = _tiny_encoder(seed, rows)
    report = gradient_check(params, inputs, make_loss(rng, rows, dim), tolerance=1e-5)
    assert report.passed, report.per_tensor


def test_gradient_check_catches_wrong_backward(rng):
    params = init_params([4, 5, 3], seed=0)

    def sloppy(p, cache, grad):
        return [1.5 * g for g in backward(p, cache, grad)]

    report = gradient_check(params, rng.standard_normal((6, 4)), _scan_loss_fn(rng, 6, 3), backward_fn=sloppy)
    assert not report.passed


def _pair(seed=0, m=0.5):
    query = init_params([3, 4, 2], seed=seed)
    pair = MomentumPair.from_query(query, m)
    for tensor in pair.key.tensors():
        tensor += 1.0
    return pair


def test_momentum_extremes():
    pair = _pair(m=1.0)
    before = _flat(pair.key).copy()
    momentum_update(pair)
    assert np.array_equal(_flat(pair.key), before)

    pair = _pair(m=0.0)
    momentum_update(pair)
    assert np.array_equal(_flat(pair.key), _flat(pair.query))


def test_momentum_scalar_average():
    query = init_params([1, 1], seed=0)
    query.weights[0][:] = 2.0
    pair = MomentumPair.from_query(query, 0.5)
    pair.key.weights[0][:] = 0.0
    momentum_update(pair)
    assert pair.key.weights[0][0, 0] == 1.0


def test_momentum_is_geometric_contraction():
    pair = _pair(m=0.9)
    gap0 = np.linalg.norm(_flat(pair.key) - _flat(pair.query))
    for t in range(1, 21):
        momentum_update(pair)
        gap = np.linalg.norm(_flat(pair.key) - _flat(pair.query))
        assert gap == pytest.approx(0.9 ** t * gap0, rel=1e-9)


def test_pair_starts_equal_and_rejects_bad_m():
    query = init_params([3, 2], seed=0)
    pair = MomentumPair.from_query(query)
    assert np.array_equal(_flat(pair.key), _flat(pair.query))
    assert pair.key.uid != pair.query.uid
    with pytest.raises(BadShape):
        MomentumPair.from_query(query, 1.5)


def test_penultimate_features(rng):
    params = init_params([4, 6, 3], seed=0)
    feats = penultimate(params, rng.standard_normal((5, 4)))
    assert feats.d == 6
    np.testing.assert_allclose(np.linalg.norm(feats.values, axis=1), 1.0, atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    pair = _pair(seed=3, m=0.97)
    path = tmp_path / "enc.scnc"
    save_checkpoint(pair, path)
    loaded = load_checkpoint(path)
    assert loaded.m == 0.97
    assert loaded.query.layer_sizes == (3, 4, 2)
    assert np.array_equal(_flat(loaded.query), _flat(pair.query))
    assert np.array_equal(_flat(loaded.key), _flat(pair.key))
    again = tmp_path / "again.scnc"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "enc.scnc"
    save_checkpoint(_pair(), path)
    blob = path.read_bytes()
    (tmp_path / "short.scnc").write_bytes(blob[:-8])
    with pytest.raises(CorruptFileError):
        load_checkpoint(tmp_path / "short.scnc")
    (tmp_path / "magic.scnc").write_bytes(b"SCNT" + blob[4:])
    with pytest.raises(FormatVersionError):
        load_checkpoint(tmp_path / "magic.scnc")
