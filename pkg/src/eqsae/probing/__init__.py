"""Binary probes (kNN, logistic regression, boosted trees) and the 180-task suite."""

from .gbt import GBTClassifier, GBTParams, Tree, presort, reference_tree
from .probes import (
    KNN_K, LogRegParams, ProbeDataset, ProbeError, class_mean_gap, f1_score, fit_logreg, gbt_probe, knn_neighbors,
    knn_predict, knn_probe, logistic_grad, logistic_loss, logreg_probe, select_top_latents,
)
from .suite import CSV_COLUMNS, PROBES, ProbeResult, Representation, SuiteOutput, orbit_split, run_task_suite

__all__ = [
    "GBTClassifier", "GBTParams", "Tree", "presort", "reference_tree", "KNN_K", "LogRegParams", "ProbeDataset", "ProbeError",
    "class_mean_gap", "f1_score", "fit_logreg", "gbt_probe", "knn_neighbors", "knn_predict", "knn_probe", "logistic_grad",
    "logistic_loss", "logreg_probe", "select_top_latents", "CSV_COLUMNS", "PROBES", "ProbeResult",
    "Representation", "SuiteOutput", "orbit_split", "run_task_suite",
]
