"""Resolution extrapolation and representation diagnostics for trained encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..model import ModelConfig, encode_optical, pool_optical
from ..posbias import GridSpec
from ..synthdata import SyntheticWorld, generate
from .probes import fit_linear_probe, fit_mlp_probe
from .tables import EmbeddingTable


def optical_patch_encodings(
    images: np.ndarray, cfg: ModelConfig, params, interp_from: GridSpec | None = None, batch_size: int = 16
) -> np.ndarray:
    """(n, L, D) unmasked optical patch encodings."""
    out = []
    with nx.no_grad():
        for s in range(0, images.shape[0], batch_size):
            out.append(encode_optical(images[s : s + batch_size], None, cfg, params, interp_from).data)
    return np.concatenate(out)


def optical_representations(images: np.ndarray, cfg: ModelConfig, params, batch_size: int = 16) -> np.ndarray:
    """(n, D) pooled optical representations of unmasked images."""
    out = []
    with nx.no_grad():
        for s in range(0, images.shape[0], batch_size):
            E_O = encode_optical(images[s : s + batch_size], None, cfg, params)
            out.append(pool_optical(E_O, params).data)
    return np.concatenate(out)


# -- extrapolation -------------------------------------------------------------

@dataclass
class ExtrapolationReport:
    train_size: int
    accuracy: dict[int, float]  # image side in pixels -> patch-segmentation accuracy
    finite: dict[int, bool]
    interp: bool

    def relative_drop(self, size: int) -> float:
        base = self.accuracy[self.train_size]
        return (base - self.accuracy[size]) / base


def _segment_table(world, n, size, start, cfg, params, stats, interp_from, split):
    ds = generate(world, n, size=size, start=start)
    optical, _ = ds.normalized(stats)
    E = optical_patch_encodings(optical, cfg, params, interp_from)
    labels = ds.segment_labels(cfg.patch_size)
    table = EmbeddingTable(E.reshape(-1, E.shape[-1]), labels.ravel(), split, "patch")
    return table, bool(np.all(np.isfinite(E)))


def extrapolation_eval(
    params,
    cfg: ModelConfig,
    sizes,
    world: SyntheticWorld | None = None,
    stats: dict | None = None,
    interp: bool = False,
    n_train: int = 96,
    n_eval: int = 48,
    start: int = 1_000_000,
    **probe_kw,
) -> ExtrapolationReport:
    """Per-patch dominant-band probing at several image sizes with a probe fitted at the training size.

    ``sizes`` are image sides in pixels and must be multiples of the patch size.
    The frozen linear probe is fitted on optical patch encodings at the training
    size and reused unchanged. With ``interp`` the sinusoidal variant resizes its
    training-grid position table to each new grid.
    """
    p = cfg.patch_size
    for s in sizes:
        if s % p or s < p:
            raise ValueError(f"image size {s} is not a positive multiple of patch size {p}")
    world = world or SyntheticWorld(size=cfg.image_size)
    train_size = cfg.image_size
    if stats is None:
        stats = generate(world, n_train, size=train_size, start=start).stats
    train_grid = cfg.grid
    interp_from = train_grid if interp and not cfg.uses_alibi else None

    tr, _ = _segment_table(world, n_train, train_size, start, cfg, params, stats, None, "train")
    va, ok = _segment_table(world, n_eval, train_size, start + n_train, cfg, params, stats, None, "val")
    probe = fit_linear_probe(tr, va, **probe_kw)
    accuracy = {train_size: probe.score(va)}
    finite = {train_size: ok}
    for s in sizes:
        if s == train_size:
            continue
        table, ok = _segment_table(world, n_eval, s, start + n_train, cfg, params, stats, interp_from, "val")
        accuracy[s] = probe.score(table)
        finite[s] = ok
    return ExtrapolationReport(train_size, accuracy, finite, interp)


# -- invariance -----------------------------------------------------------------

TRANSFORMS = {
    "identity": lambda x: x,
    "hflip": lambda x: x[..., :, ::-1],
    "vflip": lambda x: x[..., ::-1, :],
    "rot90": lambda x: np.rot90(x, 1, axes=(-2, -1)),
    "rot180": lambda x: np.rot90(x, 2, axes=(-2, -1)),
    "rot270": lambda x: np.rot90(x, 3, axes=(-2, -1)),
}


def _row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def invariance_diagnostic(
    params, cfg: ModelConfig, optical: np.ndarray, transforms=("hflip", "vflip", "rot90", "rot180", "rot270")
) -> dict[str, float]:
    """Mean cos(R_O(x), R_O(T(x))) over samples for each named transform."""
    base = optical_representations(optical, cfg, params)
    out = {}
    for name in transforms:
        moved = np.ascontiguousarray(TRANSFORMS[name](optical))
        out[name] = float(_row_cosine(base, optical_representations(moved, cfg, params)).mean())
    return out


# -- patch collapse ----------------------------------------------------------------

@dataclass
class CollapseReport:
    mean_cosine: float  # mean pairwise cosine between distinct patches of one image
    position_ce: float  # held-out cross-entropy of a patch-index probe, nats
    chance_ce: float  # ln L
    probe_grid: dict = field(default_factory=dict)


def mean_patch_cosine(E: np.ndarray) -> float:
    """Average over images of the mean cosine between distinct patch encodings."""
    n, L, _ = E.shape
    if L < 2:
        raise ValueError("need at least 2 patches")
    U = E / np.maximum(np.linalg.norm(E, axis=-1, keepdims=True), 1e-12)
    G = U @ np.swapaxes(U, 1, 2)
    off = (G.sum(axis=(1, 2)) - np.trace(G, axis1=1, axis2=2)) / (L * (L - 1))
    return float(off.mean())


def collapse_from_encodings(E: np.ndarray, **probe_kw) -> CollapseReport:
    """Collapse statistics for (n, L, D) patch encodings; the position probe trains on the first half of images."""
    n, L, D = E.shape
    if n < 2:
        raise ValueError("need at least 2 images to hold out a probe split")
    half = n // 2
    labels = np.tile(np.arange(L), n)
    rows = E.reshape(n * L, D)
    tr = EmbeddingTable(rows[: half * L], labels[: half * L], "train", "patch")
    va = EmbeddingTable(rows[half * L :], labels[half * L :], "val", "patch")
    probe_kw.setdefault("select_by", "loss")
    probe = fit_mlp_probe(tr, va, block=L, **probe_kw)
    return CollapseReport(mean_patch_cosine(E), probe.val_loss, math.log(L), probe.grid)


def collapse_diagnostic(params, cfg: ModelConfig, optical: np.ndarray, **probe_kw) -> CollapseReport:
    return collapse_from_encodings(optical_patch_encodings(optical, cfg, params), **probe_kw)
