import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arml.metric import (
    MetricFactor,
    MetricFormatError,
    load_metric,
    mahalanobis_distance,
    save_metric,
)

finite = st.floats(min_value=-100, max_value=100,
                   allow_nan=False, allow_infinity=False)


def test_identity_euclidean():
    m = MetricFactor.identity(2)
    np.testing.assert_array_equal(m.factor, np.eye(2))
    np.testing.assert_array_equal(m.matrix, np.eye(2))
    assert mahalanobis_distance(m, np.array([0.0, 0.0]),
                                np.array([3.0, 4.0])) == 25.0


def test_zero_displacement():
    m = MetricFactor(np.array([[2.0, 1.0], [0.0, 3.0]]))
    x = np.array([1.5, -2.0])
    assert mahalanobis_distance(m, x, x) == 0.0


def test_diagonal_factor_hand_value():
    # G = diag(2,1) -> M = diag(4,1); distance of (1,0) from origin is 4
    m = MetricFactor(np.diag([2.0, 1.0]))
    np.testing.assert_array_equal(m.matrix, np.diag([4.0, 1.0]))
    d = mahalanobis_distance(m, np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert d == pytest.approx(4.0, abs=1e-12)


def test_dimension_mismatch():
    m = MetricFactor.identity(3)
    with pytest.raises(ValueError):
        mahalanobis_distance(m, np.zeros(2), np.zeros(3))


def test_matrix_is_symmetric_psd():
    rng = np.random.default_rng(0)
    for _ in range(20):
        G = rng.normal(size=(4, 4))
        m = MetricFactor(G)
        np.testing.assert_array_equal(m.matrix, m.matrix.T)
        for _ in range(10):
            v = rng.normal(size=4)
            assert v @ m.matrix @ v >= -1e-9 * (v @ v)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3),
       st.lists(finite, min_size=3, max_size=3))
def test_symmetry_and_nonnegativity(xs, ys):
    m = MetricFactor(np.array([[1.0, 0.5, 0.0],
                               [0.0, 2.0, -1.0],
                               [0.3, 0.0, 1.0]]))
    x, y = np.array(xs), np.array(ys)
    d1 = mahalanobis_distance(m, x, y)
    d2 = mahalanobis_distance(m, y, x)
    assert d1 >= 0.0
    assert d1 == pytest.approx(d2, rel=1e-9, abs=1e-9)


def test_scaling_carrier():
    rng = np.random.default_rng(1)
    G = rng.normal(size=(3, 3))
    m = MetricFactor(G)
    m3 = m.scaled(3.0)
    x, y = rng.normal(size=3), rng.normal(size=3)
    d = mahalanobis_distance(m, x, y)
    d3 = mahalanobis_distance(m3, x, y)
    assert d3 == pytest.approx(3.0 * d, rel=1e-12)


def test_distance_equals_transformed_norm():
    rng = np.random.default_rng(2)
    for _ in range(30):
        r = rng.integers(1, 5)
        G = rng.normal(size=(r, 4))
        m = MetricFactor(G)
        x, y = rng.normal(size=4), rng.normal(size=4)
        d = mahalanobis_distance(m, x, y)
        ref = float(np.sum((G @ (x - y)) ** 2))
        assert d == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_save_load_identity(tmp_path):
    path = tmp_path / "m.txt"
    save_metric(MetricFactor.identity(3), path)
    m = load_metric(path)
    np.testing.assert_array_equal(m.factor, np.eye(3))


def test_save_load_random_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    G = rng.normal(size=(2, 5)) * 13.7
    path = tmp_path / "m.txt"
    save_metric(MetricFactor(G), path)
    m = load_metric(path)
    assert np.max(np.abs(m.factor - G)) <= 1e-12
    assert m.factor.shape == (2, 5)


def test_load_row_count_mismatch(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3 3\n1 0 0\n0 1 0\n")
    with pytest.raises(MetricFormatError):
        load_metric(path)


def test_load_bad_width(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 3\n1 0\n")
    with pytest.raises(MetricFormatError):
        load_metric(path)


def test_rectangular_factor_low_rank():
    G = np.array([[1.0, 0.0, 0.0]])
    m = MetricFactor(G)
    assert m.matrix.shape == (3, 3)
    assert np.linalg.matrix_rank(m.matrix) == 1
