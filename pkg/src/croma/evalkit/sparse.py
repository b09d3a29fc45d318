"""Binary probes restricted to the k dimensions with the largest between-class mean gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .probes import f1_score, fit_linear_probe
from .tables import EmbeddingTable

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class SparseProbeReport:
    target_class: int
    ranking: np.ndarray  # dimensions ordered by |mean(pos) - mean(neg)|, largest first
    mean_diff: np.ndarray
    ks: list[int]
    f1: list[float]
    prevalence: float  # positive rate in the validation split

    def rows(self) -> list[dict]:
        return [{"k": k, "f1": f} for k, f in zip(self.ks, self.f1)]


def binary_target(labels: np.ndarray, target_class: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels[:, target_class].astype(np.int64)
    return (labels == target_class).astype(np.int64)


def mean_difference_ranking(matrix: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = target.astype(bool)
    if pos.all() or not pos.any():
        raise ValueError("ranking needs both positive and negative rows")
    diff = matrix[pos].mean(axis=0) - matrix[~pos].mean(axis=0)
    return np.argsort(-np.abs(diff), kind="stable"), diff


def sparse_probe(
    train: EmbeddingTable,
    val: EmbeddingTable,
    target_class: int,
    ks=DEFAULT_KS,
    **probe_kw,
) -> SparseProbeReport:
    """One-vs-rest probing of ``target_class`` on the top-k ranked dimensions, F1 on ``val``."""
    y_train = binary_target(train.labels, target_class)
    if not y_train.any():
        raise ValueError(f"class {target_class} is absent from the training split")
    y_val = binary_target(val.labels, target_class)
    ranking, diff = mean_difference_ranking(train.matrix, y_train)
    ks = [int(k) for k in ks if 1 <= k <= train.dim]
    if not ks:
        raise ValueError("no k in range [1, D]")
    f1 = []
    for k in ks:
        cols = ranking[:k]
        tr = EmbeddingTable(train.matrix[:, cols], y_train, "train", train.source)
        va = EmbeddingTable(val.matrix[:, cols], y_val, "val", val.source)
        probe = fit_linear_probe(tr, va, **probe_kw)
        f1.append(f1_score(probe.predict(va.matrix), y_val))
    return SparseProbeReport(target_class, ranking, diff, ks, f1, float(y_val.mean()))
