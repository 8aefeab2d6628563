"""Conditional anomaly detection for binary tabular data with learned distance metrics."""

__version__ = "0.1.0"

from .data import (AttributeSchema, Dataset, GroundTruth, Instance, SchemaSpec, SyntheticConfig,
                   generate_synthetic, load_csv, project, write_csv)
from .detector import AnomalyScore, DetectorConfig, flag, score_case
from .evaluation import (Cohort, EvalReport, LooOptions, RocCurve, emit_report, partial_auc_norm,
                         roc_curve, run_loo, select_cohort, table1_grid)
from .metrics import (GeneralizedMetric, NcaOptions, distance_sq, fit_mahalanobis, fit_nca,
                      fit_rca, nca_gradient, nca_objective)
from .predictors import (NaiveBayesModel, NeighborSet, SoftmaxPredictor, nb_fit, nb_predict,
                         select_neighbors, softmax_predict)
