"""Non-parametric evaluation: cosine kNN, k-means++ clustering, Hungarian matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tables import EmbeddingTable


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, 1e-12)


def knn_classify(train: EmbeddingTable, query: EmbeddingTable | np.ndarray, k: int = 20) -> np.ndarray:
    """Cosine-similarity kNN; majority vote, ties broken by summed similarity, then by smaller label.

    Equal similarities rank the lower training index first.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.multilabel:
        raise ValueError("kNN voting needs single-label training data")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}], got {k}")
    Q = query.matrix if isinstance(query, EmbeddingTable) else np.atleast_2d(np.asarray(query, dtype=np.float64))
    sims = _unit_rows(Q) @ _unit_rows(train.matrix).T
    classes, label_idx = np.unique(train.labels, return_inverse=True)
    preds = np.empty(Q.shape[0], dtype=train.labels.dtype)
    for i, row in enumerate(sims):
        nn = np.argsort(-row, kind="stable")[:k]
        votes = np.bincount(label_idx[nn], minlength=classes.size)
        weight = np.bincount(label_idx[nn], weights=row[nn], minlength=classes.size)
        top = np.flatnonzero(votes == votes.max())
        preds[i] = classes[top[np.argmax(weight[top])]]
    return preds


# -- k-means -----------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    histories: list[list[float]]  # per restart, inertia after each assignment step
    best_restart: int

    def assign(self, X: np.ndarray) -> np.ndarray:
        return _nearest(np.asarray(X, dtype=np.float64), self.centers)[0]


def _nearest(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    d2 = np.maximum(d2, 0.0)
    idx = d2.argmin(axis=1)
    return idx, d2[np.arange(X.shape[0]), idx]


def _plus_plus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        j = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[j])
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int):
    history = []
    assign = None
    for _ in range(max_iter):
        new, d2 = _nearest(X, centers)
        history.append(float(d2.sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(centers.shape[0]):
            members = X[assign == c]
            if len(members):  # an empty cluster keeps its previous center
                centers[c] = members.mean(axis=0)
    return assign, centers, history


def kmeans_cluster(
    table: EmbeddingTable | np.ndarray, K: int, restarts: int = 10, max_iter: int = 300, seed: int = 0
) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations until assignments stop changing; best inertia over restarts."""
    X = table.matrix if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"K must be in [1, n={X.shape[0]}], got {K}")
    rng = np.random.default_rng(seed)
    best = None
    histories = []
    for r in range(restarts):
        assign, centers, history = _lloyd(X, _plus_plus(X, K, rng), max_iter)
        histories.append(history)
        if best is None or history[-1] < best[2]:
            best = (assign, centers, history[-1], r)
    assign, centers, inertia, r = best
    return KMeansResult(assign, centers, inertia, histories, r)


# -- Hungarian ----------------------------------------------------------------

def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of rows to columns by shortest augmenting paths, O(n^2 m).

    Returns (column per row, -1 where a row is left unmatched; total cost).
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    transposed = C.shape[0] > C.shape[1]
    if transposed:
        C = C.T
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # match[j] = row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if match[j]:
            row_to_col[match[j] - 1] = j - 1
    total = float(C[np.arange(n), row_to_col].sum())
    if transposed:  # rows outnumber columns: unmatched rows get -1
        col_to_row = row_to_col
        row_to_col = np.full(m, -1, dtype=np.intp)
        row_to_col[col_to_row] = np.arange(n)
    return row_to_col, total


def clustering_accuracy(assignments: np.ndarray, labels: np.ndarray) -> tuple[float, dict[int, int]]:
    """Accuracy under the cluster->class bijection that maximizes agreement."""
    clusters, a = np.unique(assignments, return_inverse=True)
    classes, y = np.unique(labels, return_inverse=True)
    size = max(clusters.size, classes.size)
    counts = np.zeros((size, size))
    np.add.at(counts, (a, y), 1.0)
    mapping, _ = hungarian_match(-counts)
    matched = counts[np.arange(size), mapping].sum()
    pairs = {int(clusters[i]): int(classes[mapping[i]]) for i in range(clusters.size) if mapping[i] < classes.size}
    return float(matched / len(labels)), pairs
