"""Instance-based predictors of the target given the context.

Two models are offered, each returning a distribution over {0, 1}:

* a softmax neighbour model, where every reference case votes for its target
  with weight proportional to ``exp(-squared distance)``;
* Bayesian Naive Bayes with Beta priors, fitted by counting.

Both are built per scored case, either on the whole database or on its
nearest neighbours (see :func:`select_neighbors`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import GeneralizedMetric

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


def select_neighbors(metric: GeneralizedMetric, query, reference: np.ndarray, k: int) -> NeighborSet:
    """The k nearest reference rows, widened to keep every tie with the k-th.

    ``reference`` is the n x d_c context matrix. Ties are squared distances
    within ``TIE_TOLERANCE`` of the k-th smallest.
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    n = reference.shape[0]
    if n == 0:
        raise ValueError("reference set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    d2 = metric.distances_sq(query, reference)
    order = np.argsort(d2, kind="stable")
    if k >= n:
        return NeighborSet(order, d2[order])
    cutoff = d2[order[k - 1]] + TIE_TOLERANCE
    count = int(np.searchsorted(d2[order], cutoff, side="right"))
    chosen = order[:count]
    return NeighborSet(chosen, d2[chosen])


@dataclass(frozen=True)
class SoftmaxPredictor:
    contexts: np.ndarray
    targets: np.ndarray
    metric: GeneralizedMetric

    def __post_init__(self):
        if len(self.targets) == 0:
            raise ValueError("softmax predictor needs at least one reference case")


def softmax_weights(d2: np.ndarray) -> np.ndarray:
    w = np.exp(-(d2 - d2.min()))
    return w / w.sum()


def softmax_predict(predictor: SoftmaxPredictor, query) -> np.ndarray:
    """Return ``[p(0), p(1)]``."""
    d2 = predictor.metric.distances_sq(query, predictor.contexts)
    w = softmax_weights(d2)
    p1 = float(w[np.asarray(predictor.targets) == 1].sum())
    p1 = min(max(p1, 0.0), 1.0)
    return np.array([1.0 - p1, p1])


@dataclass(frozen=True)
class NaiveBayesModel:
    """Sufficient statistics of a Beta-Bernoulli Naive Bayes model.

    ``class_counts[a]`` is the number of training cases with target ``a`` and
    ``feature_counts[a, f]`` how many of them have feature ``f`` set. ``alpha``
    and ``beta`` are the Beta pseudo-counts for a value of 1 and 0.
    """

    class_counts: np.ndarray
    feature_counts: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def n_features(self) -> int:
        return self.feature_counts.shape[1]

    def add(self, context, target: int, sign: int = 1) -> "NaiveBayesModel":
        """Model with one case added (``sign=1``) or removed (``sign=-1``)."""
        cc = self.class_counts.copy()
        fc = self.feature_counts.copy()
        cc[target] += sign
        fc[target] += sign * np.asarray(context, dtype=np.int64)
        if cc.min() < 0 or fc.min() < 0:
            raise ValueError("removing a case that was never counted")
        return NaiveBayesModel(cc, fc, self.alpha, self.beta)


def nb_fit(contexts, targets, alpha: float = 1.0, beta: float = 1.0,
           n_features: int | None = None) -> NaiveBayesModel:
    """Count class and per-class feature occurrences.

    An empty training set yields the prior-only model; pass ``n_features`` then.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    contexts = np.asarray(contexts)
    if contexts.size == 0:
        if n_features is None and contexts.ndim == 2:
            n_features = contexts.shape[1]
        if n_features is None:
            raise ValueError("n_features is required for an empty training set")
        X = np.zeros((targets.shape[0], n_features), dtype=np.int64)
    else:
        X = contexts.astype(np.int64).reshape(targets.shape[0], -1)
    class_counts = np.array([(targets == 0).sum(), (targets == 1).sum()], dtype=np.int64)
    feature_counts = np.stack([X[targets == 0].sum(axis=0), X[targets == 1].sum(axis=0)])
    return NaiveBayesModel(class_counts, feature_counts.astype(np.int64), alpha, beta)


def nb_predict(model: NaiveBayesModel, query) -> np.ndarray:
    """Posterior predictive ``[p(0|c), p(1|c)]`` using posterior-mean parameters."""
    c = np.asarray(query, dtype=float)
    if c.shape != (model.n_features,):
        raise ValueError(f"query has shape {c.shape}, model expects ({model.n_features},)")
    a, b = model.alpha, model.beta
    n = model.class_counts.sum()
    log_prior = np.log(np.array([model.class_counts[0] + b, model.class_counts[1] + a])) \
        - np.log(n + a + b)
    theta = (model.feature_counts + a) / (model.class_counts[:, None] + a + b)
    log_lik = (np.log(theta) * c + np.log1p(-theta) * (1.0 - c)).sum(axis=1)
    score = log_prior + log_lik
    score -= score.max()
    p = np.exp(score)
    return p / p.sum()
