import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condanom.metrics import (GeneralizedMetric, NcaOptions, NcaTrace, SingularCovarianceError,
                              distance_sq, euclidean, fit_mahalanobis, fit_nca, fit_rca,
                              load_metric, mahalanobis_from_covariance, nca_gradient,
                              nca_objective, population_covariance, rca_covariance, save_metric,
                              softmax_row_sums)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def brute_nca_objective(A, X, y):
    """Direct double loop over points, no compression, no shifting."""
    Z = X @ A.T
    n = len(X)
    total = 0.0
    for i in range(n):
        w = np.array([0.0 if k == i else np.exp(-np.sum((Z[i] - Z[k]) ** 2)) for k in range(n)])
        p = w / w.sum()
        total += sum(p[j] for j in range(n) if j != i and y[j] == y[i])
    return total


def finite_difference(f, A, h=1e-5):
    G = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        E = np.zeros_like(A)
        E[idx] = h
        G[idx] = (f(A + E) - f(A - E)) / (2 * h)
    return G


def whitened(rng, n, d):
    """Rows whose population covariance is the identity to rounding."""
    Y = rng.normal(size=(n, d))
    Y -= Y.mean(axis=0)
    L = np.linalg.cholesky(Y.T @ Y / n)
    return Y @ np.linalg.inv(L).T + rng.normal(size=d)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def test_distance_examples():
    assert distance_sq(euclidean(2), [1, 0], [0, 1]) == 2.0
    assert distance_sq(euclidean(3), [1, 2, 3], [1, 2, 3]) == 0.0
    # Q = diag(1/4, 1), u - v = (2, 2): 4/4 + 4 = 5
    m = GeneralizedMetric(np.diag([0.5, 1.0]))
    assert np.allclose(m.weights, np.diag([0.25, 1.0]))
    assert distance_sq(m, [2, 2], [0, 0]) == pytest.approx(5.0, abs=1e-15)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        distance_sq(euclidean(2), [1, 0, 0], [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pseudometric_axioms(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    m = GeneralizedMetric(rng.normal(size=(d, d)))
    u, v, w = rng.normal(size=(3, d))
    assert distance_sq(m, u, u) == 0.0
    assert distance_sq(m, u, v) == pytest.approx(distance_sq(m, v, u), rel=1e-12)
    duv, dvw, duw = (np.sqrt(distance_sq(m, a, b)) for a, b in ((u, v), (v, w), (u, w)))
    assert duw <= duv + dvw + 1e-9


def test_metric_serialization_round_trip(tmp_path):
    A = np.random.default_rng(0).normal(size=(4, 4)) / 3.0
    save_metric(GeneralizedMetric(A), tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert lines[0] == "4" and len(lines) == 5
    assert np.array_equal(load_metric(tmp_path / "m.txt").transform, A)


def test_load_metric_rejects_short_file(tmp_path):
    (tmp_path / "m.txt").write_text("2\n1 0 0\n")
    with pytest.raises(ValueError):
        load_metric(tmp_path / "m.txt")


# ---------------------------------------------------------------------------
# Mahalanobis
# ---------------------------------------------------------------------------

def test_mahalanobis_of_white_data_is_identity():
    X = whitened(np.random.default_rng(1), 200, 4)
    assert np.allclose(population_covariance(X), np.eye(4), atol=1e-12)
    m = fit_mahalanobis(X, ridge=0.0)
    assert np.allclose(m.weights, np.eye(4), atol=1e-8)
    u, v = X[0], X[1]
    assert distance_sq(m, u, v) == pytest.approx(distance_sq(euclidean(4), u, v), rel=1e-8)


def test_mahalanobis_identity_covariance_is_exactly_euclidean():
    m = mahalanobis_from_covariance(np.eye(5))
    rng = np.random.default_rng(2)
    for _ in range(20):
        u, v = rng.normal(size=(2, 5))
        assert distance_sq(m, u, v) == distance_sq(euclidean(5), u, v)


def test_mahalanobis_constant_column():
    X = np.random.default_rng(3).integers(0, 2, size=(50, 3)).astype(float)
    X[:, 1] = 1.0
    m = fit_mahalanobis(X, ridge=1e-6)
    assert np.all(np.isfinite(m.transform))
    with pytest.raises(SingularCovarianceError, match="ridge"):
        fit_mahalanobis(X, ridge=0.0)
    # default ridge also rescues it
    assert np.all(np.isfinite(fit_mahalanobis(X).transform))


def test_mahalanobis_weights_are_inverse_covariance():
    X = np.random.default_rng(4).normal(size=(300, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.5, 3]])
    m = fit_mahalanobis(X, ridge=0.0)
    assert np.allclose(m.weights, np.linalg.inv(population_covariance(X)), rtol=1e-9)
    assert np.allclose(m.transform, m.transform.T)


# ---------------------------------------------------------------------------
# RCA
# ---------------------------------------------------------------------------

def test_rca_single_white_class_is_identity():
    X = whitened(np.random.default_rng(5), 100, 3)
    m = fit_rca(X, np.zeros(100, dtype=int), ridge=0.0)
    assert np.allclose(m.transform, np.eye(3), atol=1e-8)


def test_rca_two_classes_diag_4_1():
    base = np.array([[2, 1], [2, -1], [-2, 1], [-2, -1]], dtype=float)
    X = np.vstack([base, base + [10.0, -7.0]])
    y = np.array([0] * 4 + [1] * 4)
    assert np.allclose(rca_covariance(X, y), np.diag([4.0, 1.0]))
    m = fit_rca(X, y, ridge=0.0)
    assert np.allclose(m.transform, np.diag([0.5, 1.0]), atol=1e-8)


def test_rca_whitening_identity():
    rng = np.random.default_rng(6)
    X = np.vstack([rng.normal(size=(60, 3)) @ rng.normal(size=(3, 3)),
                   rng.normal(size=(25, 3)) @ rng.normal(size=(3, 3)) + 5])
    y = np.array([0] * 60 + [1] * 25)
    m = fit_rca(X, y, ridge=0.0)
    assert np.allclose(rca_covariance(m.apply(X), y), np.eye(3), atol=1e-6)


def test_rca_unweighted_switch():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 2))
    y = np.array([0] * 10 + [1] * 20)
    expected = population_covariance(X[:10]) + population_covariance(X[10:])
    assert np.allclose(rca_covariance(X, y, "sum"), expected)
    m = fit_rca(X, y, ridge=0.0, weighting="sum")
    assert np.allclose(m.weights, np.linalg.inv(expected))


def test_rca_all_singletons_is_singular():
    X = np.arange(6, dtype=float).reshape(3, 2)
    with pytest.raises(SingularCovarianceError):
        fit_rca(X, np.array([0, 1, 2]), ridge=0.0)


# ---------------------------------------------------------------------------
# NCA objective and gradient
# ---------------------------------------------------------------------------

def test_nca_objective_examples():
    A = np.eye(1)
    assert nca_objective(A, np.array([[0.0], [5.0]]), np.array([1, 1])) == pytest.approx(2.0)
    assert nca_objective(A, np.array([[0.0], [5.0]]), np.array([1, 0])) == 0.0
    X, y = np.array([[0.0], [1.0], [3.0]]), np.array([1, 1, 0])
    expected = brute_nca_objective(A, X, y)
    assert expected == pytest.approx(1.952, abs=5e-4)
    assert nca_objective(A, X, y) == pytest.approx(expected, rel=1e-12)


def test_nca_needs_two_points():
    with pytest.raises(ValueError):
        nca_objective(np.eye(2), np.zeros((1, 2)), np.array([0]))
    with pytest.raises(ValueError):
        nca_gradient(np.eye(2), np.zeros((1, 2)), np.array([0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nca_objective_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 12)), int(rng.integers(1, 5))
    X = rng.integers(0, 2, size=(n, d)).astype(float)  # binary -> duplicates likely
    y = rng.integers(0, 2, size=n)
    A = rng.normal(size=(d, d))
    assert nca_objective(A, X, y) == pytest.approx(brute_nca_objective(A, X, y), rel=1e-9, abs=1e-12)


def test_nca_gradient_trivial_cases():
    A = np.array([[0.7, 0.2], [0.1, 1.3]])
    X = np.array([[0.0, 1.0], [2.0, -1.0]])
    assert np.array_equal(nca_gradient(A, X, np.array([0, 1])), np.zeros((2, 2)))
    assert np.allclose(nca_gradient(A, X, np.array([1, 1])), 0.0, atol=1e-15)


def test_nca_gradient_matches_finite_differences_10x5():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(10, 5))
    y = rng.integers(0, 2, size=10)
    A = rng.normal(size=(5, 5)) * 0.5
    G = nca_gradient(A, X, y)
    F = finite_difference(lambda B: nca_objective(B, X, y), A)
    assert np.max(np.abs(G - F)) / np.max(np.abs(F)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nca_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 12)), int(rng.integers(1, 6))
    X = rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    A = rng.normal(size=(d, d))
    R, _ = np.linalg.qr(rng.normal(size=(d, d)))
    assert nca_objective(R @ A, X, y) == pytest.approx(nca_objective(A, X, y), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 15)), int(rng.integers(1, 6))
    X = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
    sums = softmax_row_sums(rng.normal(size=(d, d)), X)
    assert abs(sums.sum() - n) < 1e-9


def test_nca_objective_bounds_with_far_points():
    X = np.array([[0.0], [1e3], [2e3], [2e3 + 1]])
    y = np.array([0, 1, 0, 0])
    g = nca_objective(np.eye(1), X, y)
    assert np.isfinite(g) and 0.0 <= g <= 4.0


# ---------------------------------------------------------------------------
# NCA fitting
# ---------------------------------------------------------------------------

def test_fit_nca_constant_objective_returns_initial():
    X = np.array([[0.0, 1.0], [2.0, 3.0]])
    trace = NcaTrace()
    init = np.array([[1.0, 0.5], [0.0, 2.0]])
    m = fit_nca(X, np.array([1, 1]), NcaOptions(initial=init), trace)
    assert np.array_equal(m.transform, init)
    assert trace.iterations <= 1


def test_fit_nca_single_class_returns_initial():
    X = np.random.default_rng(0).normal(size=(10, 2))
    assert np.array_equal(fit_nca(X, np.zeros(10, dtype=int)).transform, np.eye(2))


def test_fit_nca_downweights_noise_dimension():
    rng = np.random.default_rng(9)
    n = 60
    y = np.repeat([0, 1], n // 2)
    signal = np.where(y == 0, -1.0, 1.0) + 0.3 * rng.normal(size=n)
    noise = 2.0 * rng.normal(size=n)
    X = np.column_stack([signal, noise])
    trace = NcaTrace()
    m = fit_nca(X, y, NcaOptions(max_iterations=100), trace)
    Q = m.weights
    assert Q[1, 1] / Q[0, 0] < 1.0  # identity start has ratio 1
    assert trace.objectives[-1] > trace.objectives[0]


@pytest.mark.parametrize("seed", range(5))
def test_fit_nca_trace_nondecreasing(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(80, 6)).astype(float)
    y = (X[:, 0] + X[:, 1] + rng.random(80) > 1.5).astype(int)
    trace = NcaTrace()
    m = fit_nca(X, y, NcaOptions(max_iterations=30), trace)
    obj = np.array(trace.objectives)
    assert np.all(np.diff(obj) >= 0)
    assert nca_objective(m.transform, X, y) >= nca_objective(np.eye(6), X, y)


def test_nca_options_validation():
    with pytest.raises(ValueError):
        NcaOptions(max_iterations=0)
    with pytest.raises(ValueError):
        NcaOptions(tolerance=0.0)
