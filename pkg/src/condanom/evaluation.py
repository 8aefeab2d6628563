"""Leave-one-out evaluation over a grid of detector configurations.

The protocol: pick a cohort (cases a global Naive Bayes detector flags plus a
random fill), score every cohort case under each configuration with models
built without it, then summarize each configuration by the area under the ROC
curve restricted to the high-specificity region.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, GroundTruth
from .detector import METRIC_KINDS, DetectorConfig, fit_metric, score_case
from .metrics import GeneralizedMetric
from .predictors import nb_fit, nb_predict

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Cohort
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cohort:
    case_ids: tuple[str, ...]
    labels: tuple[bool, ...]
    detector_flagged: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __len__(self):
        return len(self.case_ids)

    def label_of(self) -> dict[str, bool]:
        return dict(zip(self.case_ids, self.labels))


def loo_nb_posteriors(database: Dataset, alpha: float = 1.0, beta: float = 1.0) -> np.ndarray:
    """Global Naive Bayes posterior of each case's own target, trained on all other cases."""
    X = database.contexts.astype(np.int64)
    y = database.targets
    full = nb_fit(X, y, alpha, beta, n_features=X.shape[1])
    out = np.empty(len(database))
    for i in range(len(database)):
        model = full.add(X[i], int(y[i]), sign=-1)
        out[i] = nb_predict(model, X[i])[y[i]]
    return out


def select_cohort(database: Dataset, truth: GroundTruth, n_flagged: int = 21, n_random: int = 79,
                  threshold: float = 0.05, seed: int = 0) -> Cohort:
    """Detector-flagged cases (lowest posterior first) topped up with random unflagged ones."""
    size = n_flagged + n_random
    if size > len(database):
        raise ValueError(f"cohort of {size} requested from a database of {len(database)} cases")
    truth_flags = truth.as_dict()
    missing = [c for c in database.case_ids if c not in truth_flags]
    if missing:
        raise ValueError(f"ground truth lacks {len(missing)} database ids, e.g. {missing[0]!r}")

    post = loo_nb_posteriors(database)
    flagged = np.flatnonzero(post < threshold)
    flagged = flagged[np.argsort(post[flagged], kind="stable")]
    chosen = [int(i) for i in flagged[:n_flagged]]
    warnings = []
    if len(chosen) < n_flagged:
        msg = (f"Naive Bayes flagged {len(chosen)} cases at threshold {threshold}, "
               f"fewer than the {n_flagged} requested; filling the cohort randomly")
        log.warning(msg)
        warnings.append(msg)

    flagged_set = set(int(i) for i in flagged)
    pool = np.array([i for i in range(len(database)) if i not in flagged_set], dtype=int)
    need = size - len(chosen)
    if need > len(pool):
        pool = np.array([i for i in range(len(database)) if i not in set(chosen)], dtype=int)
    rng = np.random.default_rng(seed)
    drawn = rng.choice(pool, size=need, replace=False) if need else np.array([], dtype=int)
    rows = chosen + sorted(int(i) for i in drawn)
    ids = tuple(database.case_ids[i] for i in rows)
    return Cohort(ids, tuple(truth_flags[c] for c in ids),
                  tuple(database.case_ids[i] for i in chosen), tuple(warnings))


# ---------------------------------------------------------------------------
# Leave-one-out runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LooRecord:
    case_id: str
    posterior: float
    label: bool


@dataclass(frozen=True)
class LooOptions:
    """How metrics are trained during a leave-one-out run.

    fit_mode
        ``"per-case"`` refits every metric on the database minus the scored
        case. ``"once"`` fits each metric a single time on the database minus
        the whole cohort, so no cohort case ever trains the metric used on it.
    metric_source
        ``"database"`` trains on the remaining database, ``"cohort"`` on the
        other cohort cases only (per-case mode).
    nca_warm_start
        In per-case mode, start each NCA refit from the metric fitted on the
        database minus the cohort instead of from scratch, running at most
        ``nca_refine_iterations`` further ascent steps.
    """

    fit_mode: str = "per-case"
    metric_source: str = "database"
    nca_warm_start: bool = True
    nca_refine_iterations: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.fit_mode not in ("per-case", "once"):
            raise ValueError(f"fit_mode must be 'per-case' or 'once', got {self.fit_mode!r}")
        if self.metric_source not in ("database", "cohort"):
            raise ValueError(f"metric_source must be 'database' or 'cohort', got {self.metric_source!r}")
        if self.fit_mode == "once" and self.metric_source == "cohort":
            raise ValueError("fit_mode 'once' trains on data outside the cohort; use metric_source 'database'")
        if self.nca_refine_iterations < 1 or self.jobs < 1:
            raise ValueError("nca_refine_iterations and jobs must be >= 1")


class EvaluationError(RuntimeError):
    pass


_WORKER: dict = {}


def _init_worker(database, cohort_ids, options):
    _WORKER.update(database=database, cohort_ids=cohort_ids, options=options)


def _training_rows(database: Dataset, cohort_ids, case_id, options: LooOptions) -> Dataset:
    if options.fit_mode == "once":
        return database.without(cohort_ids)
    if options.metric_source == "cohort":
        return database.subset([database.index_of(c) for c in cohort_ids if c != case_id])
    return database.without([case_id])


def _fit_task(task):
    config, case_id, initial = task
    database, cohort_ids, options = _WORKER["database"], _WORKER["cohort_ids"], _WORKER["options"]
    train = _training_rows(database, cohort_ids, case_id, options)
    try:
        if initial is not None:
            config = config.with_(nca=replace(config.nca, max_iterations=options.nca_refine_iterations))
        return fit_metric(config, train.contexts, train.targets, initial=initial).transform
    except Exception as exc:  # annotate with where it happened
        raise EvaluationError(f"fitting {config.metric_kind} metric for case {case_id!r}: {exc}") from exc


def _map(fn, tasks, database, cohort_ids, options):
    if options.jobs == 1 or len(tasks) <= 1:
        _init_worker(database, cohort_ids, options)
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=options.jobs, initializer=_init_worker,
                             initargs=(database, cohort_ids, options)) as pool:
        return list(pool.map(fn, tasks))


def fit_loo_metrics(database: Dataset, cohort_ids: Sequence[str], configs: Sequence[DetectorConfig],
                    options: LooOptions) -> dict[tuple, dict[str, GeneralizedMetric]]:
    """Metric per (metric key, cohort case), fitted without that case."""
    by_key: dict[tuple, DetectorConfig] = {}
    for cfg in configs:
        if cfg.uses_metric() and cfg.metric_kind != "euclidean":
            by_key.setdefault(cfg.metric_key, cfg)
    out: dict[tuple, dict[str, GeneralizedMetric]] = {}
    for key, cfg in by_key.items():
        if options.fit_mode == "once":
            A = _map(_fit_task, [(cfg, None, None)], database, cohort_ids, options)[0]
            metric = GeneralizedMetric(A, kind=cfg.metric_kind)
            out[key] = {c: metric for c in cohort_ids}
            continue
        initial = None
        if cfg.metric_kind == "nca" and options.nca_warm_start and options.metric_source == "database":
            base = replace(options, fit_mode="once")
            initial = _map(_fit_task, [(cfg, None, None)], database, cohort_ids, base)[0]
        tasks = [(cfg, c, initial) for c in cohort_ids]
        mats = _map(_fit_task, tasks, database, cohort_ids, options)
        out[key] = {c: GeneralizedMetric(A, kind=cfg.metric_kind) for c, A in zip(cohort_ids, mats)}
    return out


def run_loo(database: Dataset, cohort: Cohort, grid: Sequence[DetectorConfig],
            options: LooOptions | None = None) -> dict[DetectorConfig, list[LooRecord]]:
    """Score every cohort case under every configuration, leaving the case out."""
    options = options or LooOptions()
    missing = [c for c in cohort.case_ids if c not in database]
    if missing:
        raise ValueError(f"cohort ids not in database: {missing[:5]}")
    metrics = fit_loo_metrics(database, cohort.case_ids, grid, options)
    results: dict[DetectorConfig, list[LooRecord]] = {cfg: [] for cfg in grid}
    labels = cohort.label_of()
    for case_id in cohort.case_ids:
        case = database.instance(case_id)
        rest = database.without([case_id])
        for cfg in grid:
            metric = metrics[cfg.metric_key][case_id] if cfg.metric_key in metrics else None
            try:
                s = score_case(case, rest, cfg, metric)
            except Exception as exc:
                raise EvaluationError(f"scoring {cfg.label} on case {case_id!r}: {exc}") from exc
            results[cfg].append(LooRecord(case_id, s.posterior, labels[case_id]))
    return results


# ---------------------------------------------------------------------------
# ROC and partial AUC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores: Sequence[tuple[float, bool]]) -> RocCurve:
    """ROC for "lower posterior means more anomalous".

    One point per distinct posterior: the rates obtained when every case with
    posterior at or below it is called anomalous. (0, 0) and (1, 1) close the
    curve.
    """
    post = np.array([s[0] for s in scores], dtype=float)
    lab = np.array([bool(s[1]) for s in scores])
    n_pos, n_neg = int(lab.sum()), int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one anomalous and one normal case")
    order = np.argsort(post, kind="stable")
    post, lab = post[order], lab[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last_of_group = np.r_[post[1:] != post[:-1], True]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:  # unreachable with both classes present
        fpr, tpr = np.r_[fpr, 1.0], np.r_[tpr, 1.0]
    return RocCurve(fpr, tpr)


def partial_auc_norm(curve: RocCurve, min_specificity: float = 0.95) -> float:
    """Trapezoidal area over FPR in [0, 1 - min_specificity], as a percent of the region."""
    width = 1.0 - min_specificity
    if not 0.0 < width <= 1.0:
        raise ValueError("min_specificity must lie in [0, 1)")
    fpr, tpr = curve.fpr, curve.tpr
    area = 0.0
    for x0, y0, x1, y1 in zip(fpr[:-1], tpr[:-1], fpr[1:], tpr[1:]):
        if x0 >= width:
            break
        if x1 > width:
            y1 = y0 + (y1 - y0) * (width - x0) / (x1 - x0)
            x1 = width
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(min(max(100.0 * area / width, 0.0), 100.0))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def table1_grid(k: int = 40, threshold: float = 0.05, **overrides) -> list[DetectorConfig]:
    """4 metrics x 2 models x 2 scopes."""
    return [DetectorConfig(metric_kind=m, scope=s, k=k, model_kind=model, threshold=threshold,
                           **overrides)
            for model in ("softmax", "naive_bayes")
            for s in ("global", "local")
            for m in METRIC_KINDS]


@dataclass(frozen=True)
class ReportRow:
    model_kind: str
    metric_kind: str
    scope: str
    n_reference_cases: int
    pauc: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]
    min_specificity: float = 0.95

    def to_csv(self) -> str:
        lines = ["model_kind,metric_kind,scope,n_reference_cases,pauc_percent"]
        lines += [f"{r.model_kind},{r.metric_kind},{r.scope},{r.n_reference_cases},{r.pauc:.17g}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ("model", "metric", "selection", "#cases", "area")
        body = [(r.model_kind, r.metric_kind, r.scope, str(r.n_reference_cases), f"{r.pauc:.1f} %")
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths)).rstrip()
        spec = 100 * self.min_specificity
        lines = [f"Partial ROC area, specificity >= {spec:g}% (random baseline "
                 f"{(100 - spec) / 2:g}%)", fmt(header), fmt(["-" * w for w in widths])]
        lines += [fmt(b) for b in body]
        return "\n".join(lines) + "\n"


_MODEL_ORDER = {"softmax": 0, "naive_bayes": 1}
_METRIC_ORDER = {m: i for i, m in enumerate(METRIC_KINDS + ("any",))}


def _scope_key(scope: str):
    return (0, 0) if scope == "global" else (1, int(scope[5:]) if scope[5:].isdigit() else 0)


@dataclass(frozen=True)
class ScoredConfig:
    """Per-case results of one configuration, detached from the config object."""

    model_kind: str
    metric_kind: str
    scope: str
    n_reference_cases: int
    records: tuple[LooRecord, ...]


def summarize(results: dict[DetectorConfig, list[LooRecord]], n_database: int) -> list[ScoredConfig]:
    out = []
    for cfg, recs in results.items():
        n_ref = cfg.k if cfg.scope == "local" else n_database - 1
        out.append(ScoredConfig(cfg.model_kind, cfg.metric_kind, cfg.scope_label, n_ref, tuple(recs)))
    return out


def emit_report(scored: Sequence[ScoredConfig], min_specificity: float = 0.95) -> EvalReport:
    """One row per (model, metric, scope); global Naive Bayes rows collapse into one ``any`` row."""
    if not scored:
        raise ValueError("no results to report")
    rows: dict[tuple, ReportRow] = {}
    for sc in scored:
        metric = sc.metric_kind
        if sc.model_kind == "naive_bayes" and sc.scope == "global":
            metric = "any"
        key = (sc.model_kind, metric, sc.scope)
        if key in rows:
            continue
        curve = roc_curve([(r.posterior, r.label) for r in sc.records])
        rows[key] = ReportRow(sc.model_kind, metric, sc.scope, sc.n_reference_cases,
                              partial_auc_norm(curve, min_specificity))
    ordered = sorted(rows.values(), key=lambda r: (_MODEL_ORDER.get(r.model_kind, 9),
                                                   _scope_key(r.scope),
                                                   _METRIC_ORDER.get(r.metric_kind, 99)))
    return EvalReport(tuple(ordered), min_specificity)


LOO_FIELDS = ("case_id", "metric_kind", "scope", "model_kind", "posterior", "is_anomaly",
              "label", "n_reference_cases")


def write_loo_scores(scored: Sequence[ScoredConfig], path: str | Path, threshold: float) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOO_FIELDS)
        for sc in _canonical(scored):
            for r in sorted(sc.records, key=lambda r: r.case_id):
                w.writerow([r.case_id, sc.metric_kind, sc.scope, sc.model_kind,
                            f"{r.posterior:.17g}", int(r.posterior < threshold), int(r.label),
                            sc.n_reference_cases])


def read_loo_scores(path: str | Path) -> list[ScoredConfig]:
    groups: dict[tuple, list[LooRecord]] = {}
    n_ref: dict[tuple, int] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOO_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            key = (rec["model_kind"], rec["metric_kind"], rec["scope"])
            groups.setdefault(key, []).append(
                LooRecord(rec["case_id"], float(rec["posterior"]), rec["label"] == "1"))
            n_ref[key] = int(rec["n_reference_cases"])
    return [ScoredConfig(m, mk, s, n_ref[(m, mk, s)], tuple(recs))
            for (m, mk, s), recs in groups.items()]


def _canonical(scored: Sequence[ScoredConfig]) -> list[ScoredConfig]:
    return sorted(scored, key=lambda sc: (_MODEL_ORDER.get(sc.model_kind, 9), _scope_key(sc.scope),
                                          _METRIC_ORDER.get(sc.metric_kind, 99)))


def roc_filename(sc: ScoredConfig) -> str:
    return f"roc_{sc.model_kind}_{sc.metric_kind}_{sc.scope}.csv"


def write_roc(curve: RocCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for x, y in curve.points():
            w.writerow([f"{x:.17g}", f"{y:.17g}"])


def write_outputs(scored: Sequence[ScoredConfig], out_dir: str | Path, threshold: float,
                  min_specificity: float = 0.95, write_scores: bool = True) -> EvalReport:
    """Per-case scores, the report (CSV and text) and one ROC file per configuration."""
    out = Path(out_dir)
    (out / "roc").mkdir(parents=True, exist_ok=True)
    if write_scores:
        write_loo_scores(scored, out / "scores.csv", threshold)
    for sc in _canonical(scored):
        write_roc(roc_curve([(r.posterior, r.label) for r in sc.records]), out / "roc" / roc_filename(sc))
    report = emit_report(scored, min_specificity)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    return report
