import numpy as np
import pytest

from arml.dataset import Dataset, parse_libsvm
from arml.knn import KnnModel, clean_error, predict, predict_batch
from arml.metric import MetricFactor

from oracles import random_labeled_points, random_metric


def _ds(points, labels):
    y = np.asarray(labels, dtype=np.int64)
    classes = sorted(set(y.tolist()))
    return Dataset(features=np.asarray(points, dtype=np.float64),
                   labels=y, num_classes=len(classes),
                   original_labels=tuple(float(c) for c in classes))


def test_nearest_point():
    ds = _ds([[0.0, 0.0], [5.0, 5.0]], [0, 1])
    model = KnnModel(ds, MetricFactor.identity(2), 1)
    assert predict(model, np.array([0.1, 0.0])) == 0


def test_majority_vote():
    ds = _ds([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0]], [0, 0, 1])
    model = KnnModel(ds, MetricFactor.identity(2), 3)
    assert predict(model, np.array([0.0, 0.0])) == 0


def test_distance_tie_prefers_smaller_index():
    # equidistant neighbors of both classes; index 0 wins the K=1 vote
    ds = _ds([[1.0, 0.0], [-1.0, 0.0]], [1, 0])
    model = KnnModel(ds, MetricFactor.identity(2), 1)
    assert predict(model, np.array([0.0, 0.0])) == 1


def test_vote_tie_prefers_smaller_class():
    # K=3 over three classes, one neighbor each: tie broken to class 0
    ds = _ds([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [2, 1, 0])
    model = KnnModel(ds, MetricFactor.identity(2), 3)
    assert predict(model, np.array([0.0, 0.0])) == 0


def test_k_must_be_odd_and_fit():
    ds = _ds([[0.0], [1.0], [2.0]], [0, 1, 0])
    with pytest.raises(ValueError):
        KnnModel(ds, MetricFactor.identity(1), 2)
    with pytest.raises(ValueError):
        KnnModel(ds, MetricFactor.identity(1), 5)


def test_exclude_self():
    ds = _ds([[0.0], [0.2], [1.0]], [0, 1, 1])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    assert predict(model, np.array([0.0])) == 0
    assert predict(model, np.array([0.0]), exclude=0) == 1


def test_exclude_requires_enough_instances():
    ds = _ds([[0.0], [1.0]], [0, 1])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    predict(model, np.array([0.0]), exclude=0)
    small = _ds([[0.0]], [0])
    model1 = KnnModel(small, MetricFactor.identity(1), 1)
    with pytest.raises(ValueError):
        predict(model1, np.array([0.0]), exclude=0)


def test_clean_error_single_correct():
    ds = _ds([[0.0], [1.0]], [0, 1])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    test = _ds([[0.1]], [0])
    assert clean_error(model, test) == 0.0


def test_clean_error_counts_mistakes():
    ds = _ds([[0.0], [1.0]], [0, 1])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    test = _ds([[0.1], [0.2], [0.9]], [0, 1, 1])
    assert clean_error(model, test) == pytest.approx(1.0 / 3.0)


def test_leave_one_out_requires_training_set():
    ds = _ds([[0.0], [1.0], [2.0]], [0, 1, 0])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    other = _ds([[0.5], [1.5]], [0, 1])
    with pytest.raises(ValueError):
        clean_error(model, other, leave_one_out=True)


def test_leave_one_out_differs_from_resubstitution():
    # with self-matches allowed 1-NN is always perfect; excluded, not
    ds = _ds([[0.0], [0.4], [1.0]], [0, 1, 1])
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    assert clean_error(model, ds, leave_one_out=False) == 0.0
    assert clean_error(model, ds, leave_one_out=True) > 0.0


def test_prediction_invariant_to_metric_rescaling():
    rng = np.random.default_rng(7)
    ds = random_labeled_points(rng, 25, 4, num_classes=3)
    m = random_metric(rng, 4)
    model_a = KnnModel(ds, m, 3)
    model_b = KnnModel(ds, m.scaled(3.0), 3)
    queries = rng.normal(size=(40, 4))
    np.testing.assert_array_equal(predict_batch(model_a, queries),
                                  predict_batch(model_b, queries))


def test_batch_matches_single():
    rng = np.random.default_rng(8)
    ds = random_labeled_points(rng, 30, 3, num_classes=2)
    model = KnnModel(ds, random_metric(rng, 3), 3)
    queries = rng.normal(size=(10, 3))
    batch = predict_batch(model, queries)
    singles = [predict(model, q) for q in queries]
    assert batch.tolist() == singles


def test_empty_test_set_rejected():
    ds = parse_libsvm("1 1:1\n2 1:2\n")
    model = KnnModel(ds, MetricFactor.identity(1), 1)
    empty = Dataset(features=np.zeros((0, 1)),
                    labels=np.zeros(0, dtype=np.int64),
                    num_classes=2, original_labels=(1.0, 2.0))
    with pytest.raises(ValueError):
        clean_error(model, empty)
