"""Score one case: build its instance-specific model and threshold the result."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Dataset, Instance, project
from .metrics import (GeneralizedMetric, NcaOptions, euclidean, fit_mahalanobis, fit_nca,
                      fit_rca)
from .predictors import SoftmaxPredictor, nb_fit, nb_predict, select_neighbors, softmax_predict

METRIC_KINDS = ("nca", "mahalanobis", "rca", "euclidean")
MODEL_KINDS = ("softmax", "naive_bayes")
SCOPES = ("global", "local")


class LeaveOneOutError(ValueError):
    """The scored case is present in the data it is scored against."""


@dataclass(frozen=True)
class DetectorConfig:
    metric_kind: str = "euclidean"
    scope: str = "global"
    k: int = 40
    model_kind: str = "softmax"
    threshold: float = 0.05
    ridge: float | None = None
    rca_weighting: str = "size"
    nca: NcaOptions = field(default_factory=NcaOptions)
    nb_alpha: float = 1.0
    nb_beta: float = 1.0

    def __post_init__(self):
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"metric_kind must be one of {METRIC_KINDS}, got {self.metric_kind!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.nb_alpha <= 0 or self.nb_beta <= 0:
            raise ValueError("Beta hyperparameters must be positive")

    @property
    def scope_label(self) -> str:
        return f"local{self.k}" if self.scope == "local" else "global"

    @property
    def label(self) -> str:
        return f"{self.model_kind}-{self.metric_kind}-{self.scope_label}"

    @property
    def metric_key(self) -> tuple:
        """Configs sharing this key can share a fitted metric."""
        if self.metric_kind == "euclidean":
            return ("euclidean",)
        if self.metric_kind == "mahalanobis":
            return ("mahalanobis", self.ridge)
        if self.metric_kind == "rca":
            return ("rca", self.ridge, self.rca_weighting)
        o = self.nca
        init = None if o.initial is None else np.asarray(o.initial).tobytes()
        return ("nca", o.max_iterations, init, o.initial_step, o.step_growth, o.min_step,
                o.tolerance, o.ridge)

    def uses_metric(self) -> bool:
        """Global Naive Bayes trains on everything; the metric never enters."""
        return not (self.model_kind == "naive_bayes" and self.scope == "global")

    def with_(self, **changes) -> "DetectorConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class AnomalyScore:
    case_id: str
    posterior: float
    is_anomaly: bool
    config: DetectorConfig


def flag(posterior: float, threshold: float) -> bool:
    """Anomalous iff the posterior is strictly below the threshold."""
    return posterior < threshold


def fit_metric(config: DetectorConfig, contexts: np.ndarray, labels: np.ndarray,
               initial: np.ndarray | None = None) -> GeneralizedMetric:
    """Fit the metric named by ``config`` on context rows labelled by target value."""
    d = contexts.shape[1]
    kind = config.metric_kind
    if kind == "euclidean":
        return euclidean(d)
    if kind == "mahalanobis":
        return fit_mahalanobis(contexts, config.ridge)
    if kind == "rca":
        return fit_rca(contexts, labels, config.ridge, config.rca_weighting)
    opts = config.nca if initial is None else replace(config.nca, initial=initial)
    return fit_nca(contexts, labels, opts)


def score_case(case: Instance, database: Dataset, config: DetectorConfig,
               metric: GeneralizedMetric | None = None) -> AnomalyScore:
    """Posterior of the case's observed target under its instance-specific model.

    ``database`` must not contain the case and ``metric`` must have been
    fitted without it; only the case's id is checked here.
    """
    if len(database) == 0:
        raise ValueError("cannot score against an empty database")
    if case.case_id is not None and case.case_id in database:
        raise LeaveOneOutError(f"case {case.case_id!r} is present in its own reference database")
    context, target = project(case, database.schema)
    context = context.astype(float)
    X = database.contexts
    y = database.targets
    if metric is None:
        if config.uses_metric() and config.metric_kind != "euclidean":
            raise ValueError(f"{config.metric_kind} scoring needs a fitted metric")
        metric = euclidean(X.shape[1])

    if config.scope == "local":
        hood = select_neighbors(metric, context, X, config.k)
        X, y = X[hood.indices], y[hood.indices]

    if config.model_kind == "softmax":
        dist = softmax_predict(SoftmaxPredictor(X, y, metric), context)
    else:
        model = nb_fit(X, y, config.nb_alpha, config.nb_beta, n_features=X.shape[1])
        dist = nb_predict(model, context)
    posterior = float(dist[target])
    return AnomalyScore(case.case_id, posterior, flag(posterior, config.threshold), config)


SCORE_FIELDS = ("case_id", "metric_kind", "scope", "model_kind", "posterior", "is_anomaly")


def write_scores(scores: Iterable[AnomalyScore], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_FIELDS)
        for s in scores:
            writer.writerow([s.case_id, s.config.metric_kind, s.config.scope_label,
                             s.config.model_kind, f"{s.posterior:.17g}", int(s.is_anomaly)])
