"""Generalized distance metrics over context vectors.

A metric is a square linear map ``A``; the squared distance between ``u`` and
``v`` is ``||A(u - v)||^2 = (u - v)^T Q (u - v)`` with ``Q = A^T A``.

Fixed metrics (Euclidean, Mahalanobis) and two learned ones are provided:
RCA, which whitens the pooled within-class covariance in closed form, and
NCA, which climbs the expected leave-one-out soft-neighbour accuracy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GeneralizedMetric:
    transform: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        A = np.array(self.transform, dtype=float, copy=True)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"transform must be square, got shape {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "transform", A)

    @property
    def dim(self) -> int:
        return self.transform.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Q = A^T A."""
        return self.transform.T @ self.transform

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Map rows of X into the transformed space."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise ValueError(f"vectors have {X.shape[-1]} entries, metric expects {self.dim}")
        return X @ self.transform.T

    def distances_sq(self, query: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Squared distances from one query vector to every row of X."""
        diff = self.apply(np.atleast_2d(X) - np.asarray(query, dtype=float))
        return np.einsum("ij,ij->i", diff, diff)


def euclidean(dim: int) -> GeneralizedMetric:
    return GeneralizedMetric(np.eye(dim), kind="euclidean")


def distance_sq(metric: GeneralizedMetric, u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (metric.dim,) or v.shape != (metric.dim,):
        raise ValueError(
            f"dimension mismatch: metric is {metric.dim}-d, got {u.shape} and {v.shape}")
    z = metric.transform @ (u - v)
    return float(z @ z)


def default_ridge(cov: np.ndarray) -> float:
    d = cov.shape[0]
    tr = float(np.trace(cov))
    return 1e-6 * tr / d if tr > 0 else 1e-6


def _inverse_sqrt(cov: np.ndarray, ridge: float, what: str) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0) + ridge
    scale = max(float(evals.max()), 1.0)
    if evals.min() <= 1e-12 * scale:
        raise SingularCovarianceError(
            f"{what} covariance is singular; pass a positive ridge (e.g. {default_ridge(cov):.3g})")
    return (evecs / np.sqrt(evals)) @ evecs.T


def population_covariance(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=0)
    return centered.T @ centered / X.shape[0]


def mahalanobis_from_covariance(cov: np.ndarray, ridge: float = 0.0) -> GeneralizedMetric:
    cov = np.asarray(cov, dtype=float)
    if np.array_equal(cov, np.eye(cov.shape[0])) and ridge == 0.0:
        return GeneralizedMetric(np.eye(cov.shape[0]), kind="mahalanobis")
    return GeneralizedMetric(_inverse_sqrt(cov, ridge, "population"), kind="mahalanobis")


def fit_mahalanobis(X: np.ndarray, ridge: float | None = None) -> GeneralizedMetric:
    """Whiten by the population covariance of the rows: Q = (cov + ridge*I)^-1.

    ``ridge=None`` picks ``1e-6 * trace(cov) / d``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two rows to estimate a covariance")
    cov = population_covariance(X)
    if ridge is None:
        ridge = default_ridge(cov)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return mahalanobis_from_covariance(cov, ridge)


def rca_covariance(X: np.ndarray, labels: np.ndarray, weighting: str = "size") -> np.ndarray:
    """Average of within-class population covariances.

    ``weighting="size"`` weights class i by n_i / n; ``"sum"`` adds the class
    covariances unweighted.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if weighting not in ("size", "sum"):
        raise ValueError(f"unknown RCA weighting {weighting!r}")
    n, d = X.shape
    total = np.zeros((d, d))
    for cls in np.unique(labels):
        members = X[labels == cls]
        w = members.shape[0] / n if weighting == "size" else 1.0
        total += w * population_covariance(members)
    return total


def fit_rca(X: np.ndarray, labels: np.ndarray, ridge: float | None = None,
            weighting: str = "size") -> GeneralizedMetric:
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] == 0 or labels.shape != (X.shape[0],):
        raise ValueError("X must be n x d with one label per row, n >= 1")
    cov = rca_covariance(X, labels, weighting)
    if ridge is None:
        ridge = default_ridge(cov)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return GeneralizedMetric(_inverse_sqrt(cov, ridge, "within-class"), kind="rca")


# ---------------------------------------------------------------------------
# NCA
# ---------------------------------------------------------------------------

def _compress(X: np.ndarray, labels: np.ndarray):
    """Collapse duplicate (row, label) pairs into unique rows with counts.

    Binary data has many exact duplicates; the objective and its gradient are
    sums over pairs, so grouping them is exact and turns n^2 into u^2.
    """
    X = np.asarray(X)
    X = X.astype(np.result_type(X, np.float64), copy=False)
    labels = np.asarray(labels)
    if X.ndim != 2 or labels.shape != (X.shape[0],):
        raise ValueError("X must be n x d with one label per row")
    if X.shape[0] < 2:
        raise ValueError("NCA needs at least two points")
    keyed = np.column_stack([X, labels.astype(float)])
    uniq, counts = np.unique(keyed, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(X.dtype)


def _nca_terms(A, Xu, yu, m):
    """Shared pieces of the objective and gradient on compressed data.

    A point of group a may pick any of the m_b points of group b, but only
    m_a - 1 of its own group. Softmax weights are shifted by the smallest
    distance to a pickable point.
    """
    Z = Xu @ A.T
    sq = np.einsum("ij,ij->i", Z, Z)
    D = Z @ Z.T
    D *= -2.0
    D += sq[:, None]
    D += sq[None, :]
    np.maximum(D, 0.0, out=D)
    diag = np.diag_indices_from(D)
    # a singleton group cannot pick itself
    D[diag] = np.where(m > 1, 0.0, np.inf)
    shift = D.min(axis=1)
    shift[~np.isfinite(shift)] = 0.0
    D -= shift[:, None]
    np.negative(D, out=D)
    E = np.exp(D, out=D)
    E *= m[None, :]
    E[diag] = np.where(m > 1, (m - 1.0) * E[diag] / np.maximum(m, 1.0), 0.0)
    Zs = E.sum(axis=1)
    E /= np.where(Zs > 0, Zs, 1.0)[:, None]
    P = E                                        # P[a, b]: prob. of picking *some* point of b
    same = yu[:, None] == yu[None, :]
    p_correct = (P * same).sum(axis=1)
    return P, same, p_correct


def nca_objective(A: np.ndarray, X: np.ndarray, labels: np.ndarray) -> float:
    """Expected number of points whose soft nearest neighbour shares their label.

    Inputs wider than float64 (``np.longdouble``) are kept at that precision
    and the value is returned as a numpy scalar of the same type.
    """
    Xu, yu, m = _compress(X, labels)
    A = np.asarray(A)
    value = m @ _nca_terms(A.astype(np.result_type(A, Xu), copy=False), Xu, yu, m)[2]
    return float(value) if value.dtype == np.float64 else value


def nca_gradient(A: np.ndarray, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    Xu, yu, m = _compress(X, labels)
    return _nca_grad(A, Xu, yu, m)[1]


def _nca_grad(A, Xu, yu, m, terms=None):
    P, same, p_correct = terms if terms is not None else _nca_terms(A, Xu, yu, m)
    # per-pair weight of x_ab x_ab^T in  sum_i (p_i sum_k p_ik x x^T - sum_j in C_i p_ij x x^T)
    W = m[:, None] * (p_correct[:, None] * P - P * same)
    np.fill_diagonal(W, 0.0)
    L = np.diag(W.sum(axis=0) + W.sum(axis=1)) - W - W.T
    return float(m @ p_correct), 2.0 * A @ (Xu.T @ L @ Xu)


def softmax_row_sums(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """sum_{j != i} p_ij for every i (each is 1 when n >= 2)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    P, _, _ = _nca_terms(np.asarray(A, dtype=float), X, np.zeros(n), np.ones(n))
    return P.sum(axis=1)


@dataclass(frozen=True)
class NcaOptions:
    max_iterations: int = 200
    initial: np.ndarray | None = None
    initial_step: float = 1.0
    step_growth: float = 1.5
    min_step: float = 1e-10
    tolerance: float = 1e-6
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.initial_step <= 0 or self.min_step <= 0 or self.step_growth < 1:
            raise ValueError("step schedule must be positive and non-shrinking")


@dataclass
class NcaTrace:
    objectives: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    iterations: int = 0


def fit_nca(X: np.ndarray, labels: np.ndarray, opts: NcaOptions | None = None,
            trace: NcaTrace | None = None) -> GeneralizedMetric:
    """Gradient ascent on the NCA objective with a backtracking line search.

    The step moves along the normalized gradient; a trial step is halved until
    the objective does not decrease, and grows by ``step_growth`` after each
    accepted move. Stops after ``max_iterations`` or once an accepted step
    improves the objective by less than ``tolerance``.

    ``opts.ridge`` adds ``-ridge * ||A||_F^2`` to the objective, keeping A
    bounded when classes are separable.
    """
    opts = opts or NcaOptions()
    trace = trace if trace is not None else NcaTrace()
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    d = X.shape[1]
    A = np.eye(d) if opts.initial is None else np.array(opts.initial, dtype=float)
    if A.shape != (d, d):
        raise ValueError(f"initial transform must be {d}x{d}")
    if X.shape[0] < 2 or np.unique(labels).size < 2:
        trace.iterations = 0
        return GeneralizedMetric(A, kind="nca")

    Xu, yu, m = _compress(X, labels)

    def evaluate(B):
        terms = _nca_terms(B, Xu, yu, m)
        return float(m @ terms[2]) - opts.ridge * np.sum(B * B), terms

    def gradient(B, terms):
        return _nca_grad(B, Xu, yu, m, terms)[1] - 2.0 * opts.ridge * B

    g, terms = evaluate(A)
    G = gradient(A, terms)
    trace.objectives.append(g)
    step = opts.initial_step
    for it in range(1, opts.max_iterations + 1):
        trace.iterations = it
        gnorm = np.linalg.norm(G)
        if gnorm == 0.0:
            break
        direction = G / gnorm
        while step >= opts.min_step:
            trial = A + step * direction
            g_trial, trial_terms = evaluate(trial)
            if g_trial >= g:
                break
            step *= 0.5
        else:
            break
        improvement = g_trial - g
        A, g = trial, g_trial
        trace.objectives.append(g)
        trace.steps.append(step)
        step *= opts.step_growth
        if improvement < opts.tolerance:
            break
        G = gradient(A, trial_terms)
    log.debug("nca: %d iterations, objective %.6g -> %.6g",
              trace.iterations, trace.objectives[0], trace.objectives[-1])
    return GeneralizedMetric(A, kind="nca")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_metric(metric: GeneralizedMetric, path: str | Path) -> None:
    """Plain text: the dimension on the first line, then rows of A."""
    A = metric.transform
    lines = [str(metric.dim)]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in A]
    Path(path).write_text("\n".join(lines) + "\n")


def load_metric(path: str | Path, kind: str = "custom") -> GeneralizedMetric:
    tokens = Path(path).read_text().split()
    if not tokens:
        raise ValueError(f"{path}: empty metric file")
    d = int(tokens[0])
    values = [float(t) for t in tokens[1:]]
    if len(values) != d * d:
        raise ValueError(f"{path}: expected {d * d} entries for a {d}x{d} transform, got {len(values)}")
    return GeneralizedMetric(np.array(values).reshape(d, d), kind=kind)
