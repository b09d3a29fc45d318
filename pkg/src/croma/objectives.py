"""Masked reconstruction loss, bidirectional InfoNCE and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .masking import MaskPlan
from .model import EncodingBundle, ModelConfig, patchify
from .numerics import Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    l_con: float
    l_mae: float
    l_mae_optical: float
    l_mae_radar: float
    lambda_con: float
    lambda_mae: float
    sigma: float

    def row(self) -> dict[str, float]:
        return {
            "l_con": self.l_con,
            "l_mae_optical": self.l_mae_optical,
            "l_mae_radar": self.l_mae_radar,
            "total": float(self.total.item()),
            "sigma": self.sigma,
        }


def normalize_targets(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch (x - mean) / sqrt(var + eps) with population variance. Plain data, no graph."""
    x = np.asarray(patches, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("patches need at least one value")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _masked_matrix(plans: Sequence[MaskPlan], which: str) -> np.ndarray:
    rows = [getattr(p, which) for p in plans]
    if any(len(r) == 0 for r in rows):
        raise ValueError(f"{which} is empty: reconstruction loss needs masked patches")
    if len({len(r) for r in rows}) != 1:
        raise ValueError("all plans in a batch must mask the same number of patches")
    return np.asarray(rows, dtype=np.intp)


def _masked_mse(pred: Tensor, image: np.ndarray, masked: np.ndarray, patch: int) -> Tensor:
    target = normalize_targets(patchify(image, patch))
    batch = np.arange(target.shape[0])[:, None]
    diff = nx.sub(nx.take_rows(pred, masked), target[batch, masked])
    per_sample = nx.tmean(nx.tmean(nx.mul(diff, diff), axis=-1), axis=-1)
    return nx.tmean(per_sample)


def mae_loss(
    I_hat_O: Tensor,
    I_hat_R: Tensor,
    I_O: np.ndarray,
    I_R: np.ndarray,
    plans: Sequence[MaskPlan],
    target_mode: str,
    patch: int,
) -> tuple[Tensor, Tensor]:
    """(optical, radar) reconstruction errors on masked patches only.

    Each term is the mean over masked patches of the per-patch mean squared
    error against normalized targets, then averaged over the batch.
    """
    I_O = np.asarray(I_O, dtype=np.float64)
    I_R = np.asarray(I_R, dtype=np.float64)
    if I_O.ndim == 3:
        I_O, I_R = I_O[None], I_R[None]
    if isinstance(plans, MaskPlan):
        plans = [plans] * I_O.shape[0]
    zero = Tensor(0.0)
    l_o = zero
    l_r = zero
    if target_mode in ("both", "optical-only"):
        l_o = _masked_mse(I_hat_O, I_O, _masked_matrix(plans, "masked_O"), patch)
    if target_mode in ("both", "radar-only"):
        l_r = _masked_mse(I_hat_R, I_R, _masked_matrix(plans, "masked_R"), patch)
    if target_mode not in ("both", "optical-only", "radar-only"):
        raise ValueError(f"unknown MAE target mode {target_mode!r}")
    return l_o, l_r


def info_nce(z_R: Tensor, z_O: Tensor, sigma) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives: mean of radar->optical and optical->radar terms."""
    sigma_val = sigma.item() if isinstance(sigma, Tensor) else float(sigma)
    if not sigma_val > 0:
        raise ValueError(f"temperature must be positive, got {sigma_val}")
    z_R = z_R if isinstance(z_R, Tensor) else Tensor(z_R)
    z_O = z_O if isinstance(z_O, Tensor) else Tensor(z_O)
    if z_R.shape != z_O.shape or z_R.ndim != 2 or z_R.shape[0] < 1:
        raise ValueError(f"embeddings must be matching (N, P) arrays, got {z_R.shape} / {z_O.shape}")
    N = z_R.shape[0]
    logits = nx.div(nx.matmul(z_R, nx.transpose(z_O)), sigma)
    diag = (np.arange(N), np.arange(N))
    r2o = nx.getitem(nx.log_softmax_lastdim(logits), diag).sum()
    o2r = nx.getitem(nx.log_softmax_lastdim(nx.transpose(logits)), diag).sum()
    return nx.mul(nx.add(r2o, o2r), -1.0 / (2 * N))


def combined_loss(
    bundle: EncodingBundle,
    reconstructions: tuple[Tensor, Tensor],
    optical: np.ndarray,
    radar: np.ndarray,
    plans: Sequence[MaskPlan],
    cfg: ModelConfig,
    sigma,
) -> LossBreakdown:
    l_con = info_nce(bundle.z_R, bundle.z_O, sigma)
    l_o, l_r = mae_loss(reconstructions[0], reconstructions[1], optical, radar, plans, cfg.mae_target, cfg.patch_size)
    l_mae = nx.add(l_o, l_r)
    total = nx.add(nx.mul(l_con, cfg.lambda_con), nx.mul(l_mae, cfg.lambda_mae))
    return LossBreakdown(
        total=total,
        l_con=l_con.item(),
        l_mae=l_mae.item(),
        l_mae_optical=l_o.item(),
        l_mae_radar=l_r.item(),
        lambda_con=cfg.lambda_con,
        lambda_mae=cfg.lambda_mae,
        sigma=sigma.item() if isinstance(sigma, Tensor) else float(sigma),
    )
