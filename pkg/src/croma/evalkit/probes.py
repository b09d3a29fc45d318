"""Linear and one-hidden-layer probes trained on frozen embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..numerics import LrSchedule, OptimizerState, Tensor, adamw_step, lr_at
from .tables import EmbeddingTable

LR_GRID = (1e-3, 3e-3, 1e-2)
FULL_LR_GRID = tuple(m * 10.0**e for e in (-4, -3, -2) for m in range(1, 10))


def mlp_hidden_width(dim: int) -> int:
    return min(2048, 4 * dim)


# -- metrics ----------------------------------------------------------------

def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def f1_score(pred: np.ndarray, target: np.ndarray) -> float:
    """Binary F1 of the positive class; 0 when there are no true or predicted positives."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    tp = np.sum(pred & target)
    denom = pred.sum() + target.sum()
    return float(2 * tp / denom) if denom else 0.0


def average_precision(scores: np.ndarray, target: np.ndarray) -> float:
    """Mean precision at the rank of each positive, scores sorted descending."""
    order = np.argsort(-scores, kind="stable")
    hits = np.asarray(target, dtype=bool)[order]
    if not hits.any():
        return float("nan")
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].mean())


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """mAP over classes that have at least one positive."""
    aps = [average_precision(scores[:, c], targets[:, c]) for c in range(targets.shape[1])]
    aps = [a for a in aps if not np.isnan(a)]
    if not aps:
        raise ValueError("no class has a positive example")
    return float(np.mean(aps))


# -- probe model ------------------------------------------------------------

@dataclass
class Probe:
    kind: str  # "linear" | "mlp"
    params: dict[str, np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray  # class ids for single-label, column count for multi-label
    multilabel: bool
    lr: float
    val_metric: float
    val_loss: float
    grid: dict[float, tuple[float, float]] = field(default_factory=dict)  # lr -> (metric, loss)

    def logits(self, X: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            p = {k: Tensor(v) for k, v in self.params.items()}
            return _forward(self.kind, p, Tensor((np.asarray(X) - self.mean) / self.scale)).data

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = self.logits(X)
        if self.multilabel:
            return (out > 0).astype(np.int64)
        return self.classes[out.argmax(axis=-1)]

    def score(self, table: EmbeddingTable) -> float:
        """Accuracy (single-label) or mAP (multi-label)."""
        if self.multilabel:
            return mean_average_precision(self.logits(table.matrix), table.labels)
        return accuracy(self.predict(table.matrix), table.labels)

    def loss(self, table: EmbeddingTable) -> float:
        targets = _targets(table.labels, self.classes, self.multilabel)
        with nx.no_grad():
            p = {k: Tensor(v) for k, v in self.params.items()}
            x = Tensor((table.matrix - self.mean) / self.scale)
            return _loss(_forward(self.kind, p, x), targets, self.multilabel).item()


def _forward(kind: str, p: dict[str, Tensor], x: Tensor) -> Tensor:
    if kind == "mlp":
        x = nx.relu(nx.linear(x, p["fc1.w"], p["fc1.b"]))
    return nx.linear(x, p["out.w"], p["out.b"])


def _loss(logits: Tensor, targets: np.ndarray, multilabel: bool) -> Tensor:
    if multilabel:
        # binary cross-entropy with logits: softplus(x) - y x
        return nx.tmean(nx.sub(nx.softplus(logits), nx.mul(logits, targets)))
    picked = nx.mul(nx.log_softmax_lastdim(logits), targets)
    return nx.mul(nx.tsum(picked), -1.0 / targets.shape[0])


def _targets(labels: np.ndarray, classes: np.ndarray, multilabel: bool) -> np.ndarray:
    if multilabel:
        return np.asarray(labels, dtype=np.float64)
    idx = np.searchsorted(classes, labels)
    if np.any(idx >= classes.size) or np.any(classes[np.minimum(idx, classes.size - 1)] != labels):
        raise ValueError("labels contain classes the probe was not trained on")
    return np.eye(classes.size)[idx]


def _init(kind: str, dim: int, n_out: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {}
    width = dim
    if kind == "mlp":
        bound = np.sqrt(6.0 / (dim + hidden))
        p["fc1.w"] = rng.uniform(-bound, bound, size=(dim, hidden))
        p["fc1.b"] = np.zeros(hidden)
        width = hidden
    # zero-initialised output layer: the trained head does not depend on feature order
    p["out.w"] = np.zeros((width, n_out))
    p["out.b"] = np.zeros(n_out)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _train_one(
    kind: str,
    X: np.ndarray,
    Y: np.ndarray,
    multilabel: bool,
    lr: float,
    epochs: int,
    batch_size: int,
    hidden: int,
    seed: int,
    block: int,
    warmup_frac: float,
    weight_decay: float,
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = _init(kind, X.shape[1], Y.shape[1], hidden, rng)
    n = X.shape[0]
    n_blocks = n // block
    blocks_per_batch = max(1, batch_size // block)
    steps_per_epoch = -(-n_blocks // blocks_per_batch)
    total = max(1, epochs * steps_per_epoch)
    schedule = LrSchedule(lr, warmup_frac, total)
    state = OptimizerState(weight_decay=weight_decay, no_decay=frozenset(k for k, v in params.items() if v.ndim < 2))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n_blocks)
        for s in range(0, n_blocks, blocks_per_batch):
            rows = (order[s : s + blocks_per_batch, None] * block + np.arange(block)).ravel()
            loss = _loss(_forward(kind, params, Tensor(X[rows])), Y[rows], multilabel)
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            params = adamw_step(state, params, grads, lr_at(schedule, min(step, total)))
            step += 1
    return {k: p.data for k, p in params.items()}


def fit_probe(
    train: EmbeddingTable,
    val: EmbeddingTable | None = None,
    kind: str = "linear",
    lr_grid=LR_GRID,
    epochs: int = 30,
    batch_size: int = 256,
    hidden: int | None = None,
    seed: int = 0,
    select_by: str = "metric",
    block: int = 1,
    warmup_frac: float = 0.05,
    weight_decay: float = 0.01,
) -> Probe:
    """Train one head per learning rate and keep the best on ``val``.

    Features are standardized with training statistics. Without a validation
    table, the last 20% of training rows select the learning rate. ``block``
    shuffles rows in contiguous groups of that size (e.g. all patches of an
    image), so every minibatch holds whole groups.
    """
    if kind not in ("linear", "mlp"):
        raise ValueError(f"unknown probe kind {kind!r}")
    if select_by not in ("metric", "loss"):
        raise ValueError("select_by must be 'metric' or 'loss'")
    multilabel = train.multilabel
    if multilabel:
        classes = np.arange(train.labels.shape[1])
        if not (train.labels.any(axis=0).sum() >= 1 and train.labels.shape[1] >= 2):
            raise ValueError("multi-label probing needs at least 2 label columns")
    else:
        classes = np.unique(train.labels)
        if classes.size < 2:
            raise ValueError("probing needs at least 2 classes in the training set")
    if val is None:
        cut = int(len(train) * 0.8) // block * block
        train, val = train.subset(np.arange(cut)), train.subset(np.arange(cut, len(train)), "val")
    if len(train) % block:
        raise ValueError("row count must be a multiple of the block size")
    mean = train.matrix.mean(axis=0)
    scale = train.matrix.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    X = (train.matrix - mean) / scale
    Y = _targets(train.labels, classes, multilabel)
    hidden = hidden or mlp_hidden_width(train.dim)

    best = None
    grid = {}
    for lr in lr_grid:
        weights = _train_one(
            kind, X, Y, multilabel, lr, epochs, batch_size, hidden, seed, block, warmup_frac, weight_decay
        )
        probe = Probe(kind, weights, mean, scale, classes, multilabel, lr, 0.0, 0.0)
        probe.val_metric = probe.score(val)
        probe.val_loss = probe.loss(val)
        grid[lr] = (probe.val_metric, probe.val_loss)
        key = probe.val_metric if select_by == "metric" else -probe.val_loss
        if best is None or key > best[0]:
            best = (key, probe)
    probe = best[1]
    probe.grid = grid
    return probe


def fit_linear_probe(train: EmbeddingTable, val: EmbeddingTable | None = None, **kw) -> Probe:
    return fit_probe(train, val, kind="linear", **kw)


def fit_mlp_probe(train: EmbeddingTable, val: EmbeddingTable | None = None, hidden: int | None = None, **kw) -> Probe:
    """Linear(ReLU(Linear(x))) with hidden width min(2048, 4 * D) unless given."""
    return fit_probe(train, val, kind="mlp", hidden=hidden, **kw)
