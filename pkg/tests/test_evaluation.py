import json

import numpy as np
import pytest

from scan_pretrain.embedding import EmbeddingMatrix, LabelVector
from scan_pretrain.errors import EmptyTrainSet, IndexOutOfRange, NotConverged
from scan_pretrain.evaluation import (
    ProbeConfig,
    knn_probe,
    linear_probe,
    retrieval_report,
    write_report_csv,
    write_summary_json,
)

from .conftest import unit_rows


def _angles(degrees):
    radians = np.deg2rad(degrees)
    return np.stack([np.cos(radians), np.sin(radians)], axis=1)


def _clusters(rng, centers, per_class, spread=0.05):
    rows = np.repeat(np.asarray(centers, dtype=np.float64), per_class, axis=0)
    rows += rng.standard_normal(rows.shape) * spread
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows, np.repeat(np.arange(len(centers)), per_class)


# k-NN


def test_knn_on_its_own_training_set(rng):
    x = unit_rows(rng, 40, 6)
    y = rng.integers(0, 5, size=40)
    result = knn_probe(x, y, x, y, k=1)
    assert result.accuracy == 1.0
    assert result.top5 == 1.0


def test_knn_with_random_labels_is_chance(rng):
    x_train, x_test = unit_rows(rng, 2000, 8), unit_rows(rng, 2000, 8)
    result = knn_probe(x_train, rng.integers(0, 4, 2000), x_test, rng.integers(0, 4, 2000), k=5)
    # three binomial standard deviations at n=2000, p=0.25
    assert abs(result.accuracy - 0.25) <= 3.0 * np.sqrt(0.25 * 0.75 / 2000)


def test_knn_hand_example():
    train = EmbeddingMatrix(_angles([0, 20, 180, 200]), normalized=True)
    test = EmbeddingMatrix(_angles([10, 190, 95]), normalized=True)
    result = knn_probe(train, LabelVector([0, 0, 1, 1]), test, LabelVector([0, 1, 0]), k=2)
    # the 95 degree point sits between 20 and 180: one vote each, ties go to class 0
    assert result.accuracy == 1.0
    assert knn_probe(train, LabelVector([0, 0, 1, 1]), test, LabelVector([0, 1, 0]), k=1).accuracy == 1.0


def test_knn_vote_ties_go_to_lowest_class():
    train = _angles([30, -30])
    test = _angles([0])
    assert knn_probe(train, [3, 1], test, [1], k=2).accuracy == 1.0
    assert knn_probe(train, [3, 1], test, [3], k=2).accuracy == 0.0


def test_knn_empty_train_set():
    with pytest.raises(EmptyTrainSet):
        knn_probe(np.empty((0, 3)), [], _angles([0, 90]) @ np.eye(2, 3), [0, 1])


# linear


@pytest.mark.filterwarnings("ignore::scan_pretrain.errors.NotConverged")
def test_linear_probe_separates_clusters(rng):
    x, y = _clusters(rng, np.eye(3), 20)
    result = linear_probe(x, y, x, y)
    assert result.accuracy == 1.0
    assert result.top5 == 1.0
    assert not result.degenerate


@pytest.mark.filterwarnings("ignore::scan_pretrain.errors.NotConverged")
def test_linear_objective_never_increases(rng):
    x, y = _clusters(rng, unit_rows(rng, 4, 5), 15, spread=0.4)
    result = linear_probe(x, y, x, y, ProbeConfig(learning_rate=5.0, max_iterations=200))
    assert len(result.objective_trace) == result.iterations + 1
    assert np.all(np.diff(result.objective_trace) <= 0)


def test_single_training_class_is_degenerate(rng):
    x = unit_rows(rng, 6, 3)
    result = linear_probe(x, np.full(6, 2), x[:4], [2, 2, 0, 1])
    assert result.degenerate
    assert result.accuracy == 0.5
    assert linear_probe(x, np.full(6, 2), x[:3], [2, 2, 2]).accuracy == 1.0


@pytest.mark.filterwarnings("ignore::scan_pretrain.errors.NotConverged")
def test_xor_is_not_linearly_separable():
    x = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    assert linear_probe(x, y, x, y).accuracy <= 0.75


def test_iteration_cap_warns(rng):
    x, y = _clusters(rng, np.eye(3), 10)
    with pytest.warns(NotConverged):
        result = linear_probe(x, y, x, y, ProbeConfig(max_iterations=1))
    assert not result.converged
    assert result.iterations == 1


def test_linear_empty_train_set():
    with pytest.raises(EmptyTrainSet):
        linear_probe(np.empty((0, 2)), [], np.eye(2), [0, 1])


# retrieval


def _six_points():
    gallery = EmbeddingMatrix(_angles([0, 10, 25, 90, 100, 190]), normalized=True)
    return gallery, LabelVector([0, 0, 0, 1, 1, 0], modes=[0, 0, 1, 0, 1, 1])


def test_hand_enumerated_retrieval():
    gallery, labels = _six_points()
    report = retrieval_report(gallery, labels, k=2)
    assert report.retrieved.tolist() == [[1, 2], [0, 2], [1, 0], [4, 2], [3, 2], [4, 3]]
    assert report.class_purity.tolist() == [1.0, 1.0, 1.0, 0.5, 0.5, 0.0]
    assert report.mean_class_purity == pytest.approx(4 / 6)
    assert report.mode_purity.tolist() == [0.5, 0.5, 0.0, 0.0, 0.0, 0.0]
    assert report.mean_mode_purity == pytest.approx(1 / 6)
    assert report.mean_joint_purity == pytest.approx(1 / 6)


def test_mode_ids_only_match_inside_a_class():
    gallery = EmbeddingMatrix(_angles([0, 10]), normalized=True)
    report = retrieval_report(gallery, LabelVector([0, 1], modes=[0, 0]), k=1)
    assert report.class_purity.tolist() == [0.0, 0.0]
    assert report.mode_purity.tolist() == [0.0, 0.0]
    assert report.joint_purity.tolist() == [0.0, 0.0]


def test_joint_purity_bounded_by_both(rng):
    gallery = unit_rows(rng, 60, 4)
    labels = LabelVector(rng.integers(0, 3, 60), modes=rng.integers(0, 2, 60))
    report = retrieval_report(gallery, labels, k=5)
    assert np.all(report.joint_purity <= np.minimum(report.class_purity, report.mode_purity))


def test_identical_vectors_per_class_are_pure():
    gallery = np.repeat(_angles([0, 120, 240]), 4, axis=0)
    labels = LabelVector(np.repeat([0, 1, 2], 4), modes=np.zeros(12, dtype=int))
    report = retrieval_report(gallery, labels, k=3)
    assert report.mean_class_purity == 1.0
    assert report.mean_joint_purity == 1.0


def test_retrieving_everything_gives_the_class_prior():
    gallery, labels = _six_points()
    report = retrieval_report(gallery, labels, k=10)
    assert report.k == 5
    # each query sees the other five rows: c0 queries 3/5, c1 queries 1/5
    np.testing.assert_allclose(report.class_purity, [0.6, 0.6, 0.6, 0.2, 0.2, 0.6])


def test_query_subset_and_range_check():
    gallery, labels = _six_points()
    report = retrieval_report(gallery, labels, queries=[5], k=2)
    assert report.queries.tolist() == [5]
    assert report.retrieved.tolist() == [[4, 3]]
    with pytest.raises(IndexOutOfRange):
        retrieval_report(gallery, labels, queries=[6])


def test_class_only_labels_skip_mode_purity():
    gallery, _ = _six_points()
    report = retrieval_report(gallery, LabelVector([0, 0, 0, 1, 1, 0]), k=2)
    assert report.mode_purity is None
    assert report.summary()["joint_purity"] is None


# reports


def test_report_writers(tmp_path):
    gallery, labels = _six_points()
    report = retrieval_report(gallery, labels, k=2)
    csv_path = tmp_path / "report.csv"
    write_report_csv(report, csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "query,retrieved,class_purity,mode_purity,joint_purity"
    assert lines[1] == "0,1 2,1.0,0.5,0.5"
    assert len(lines) == 7

    json_path = tmp_path / "summary.json"
    write_summary_json({"retrieval": report.summary(), "knn": None}, json_path)
    loaded = json.loads(json_path.read_text())
    assert loaded["retrieval"]["k"] == 2
    assert list(loaded) == ["knn", "retrieval"]


def test_worker_count_does_not_change_results(rng):
    x, y = _clusters(rng, unit_rows(rng, 4, 6), 25, spread=0.3)
    modes = np.arange(y.size) % 3
    knn = [knn_probe(x, y, x[::2], y[::2], k=7, workers=w).accuracy for w in (1, 4)]
    assert knn[0] == knn[1]
    single = retrieval_report(x, LabelVector(y, modes), k=4)
    pooled = retrieval_report(x, LabelVector(y, modes), k=4, workers=4)
    assert np.array_equal(single.retrieved, pooled.retrieved)
    assert np.array_equal(single.joint_purity, pooled.joint_purity)
