"""Frozen-representation evaluation: probes, kNN, clustering, sparse probing, diagnostics."""

from .harness import (
    TRANSFORMS,
    CollapseReport,
    ExtrapolationReport,
    collapse_diagnostic,
    collapse_from_encodings,
    extrapolation_eval,
    invariance_diagnostic,
    mean_patch_cosine,
    optical_patch_encodings,
    optical_representations,
)
from .neighbors import KMeansResult, clustering_accuracy, hungarian_match, kmeans_cluster, knn_classify
from .probes import (
    FULL_LR_GRID,
    LR_GRID,
    Probe,
    accuracy,
    average_precision,
    f1_score,
    fit_linear_probe,
    fit_mlp_probe,
    fit_probe,
    mean_average_precision,
    mlp_hidden_width,
)
from .sparse import SparseProbeReport, mean_difference_ranking, sparse_probe
from .tables import EmbeddingTable

__all__ = [
    "TRANSFORMS",
    "CollapseReport",
    "EmbeddingTable",
    "ExtrapolationReport",
    "FULL_LR_GRID",
    "KMeansResult",
    "LR_GRID",
    "Probe",
    "SparseProbeReport",
    "accuracy",
    "average_precision",
    "clustering_accuracy",
    "collapse_diagnostic",
    "collapse_from_encodings",
    "extrapolation_eval",
    "f1_score",
    "fit_linear_probe",
    "fit_mlp_probe",
    "fit_probe",
    "hungarian_match",
    "invariance_diagnostic",
    "kmeans_cluster",
    "knn_classify",
    "mean_average_precision",
    "mean_difference_ranking",
    "mean_patch_cosine",
    "mlp_hidden_width",
    "optical_patch_encodings",
    "optical_representations",
    "sparse_probe",
]
