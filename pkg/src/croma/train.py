"""Pretraining loop, run configuration, checkpoints and embedding export."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .masking import MaskPlan, sample_batch_masks
from .model import (
    ConfigError,
    ModelConfig,
    encode,
    forward_full,
    init_params,
    no_decay_names,
    temperature,
)
from .numerics import LrSchedule, OptimizerState, Tensor, adamw_step, check_gradients, lr_at
from .evalkit.tables import SOURCES, EmbeddingTable
from .objectives import combined_loss
from .synthdata import AugmentConfig, SyntheticDataset, SyntheticWorld, augment_batch, generate, load_dataset

log = logging.getLogger(__name__)

METRICS_SCHEMA = "croma-metrics/1"
METRICS_COLUMNS = ("step", "lr", "l_con", "l_mae_optical", "l_mae_radar", "total", "sigma")
CHECKPOINT_FORMAT = "croma-checkpoint/1"


def _default_model() -> ModelConfig:
    return ModelConfig.toy(patch_size=4)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=_default_model)
    steps: int = 500
    batch_size: int = 32
    base_lr: float = 8e-3  # per 256 samples; 1e-3 effective at batch 32
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0
    dataset: str | None = None
    out_dir: str | None = None
    checkpoint_every: int = 0
    augment: bool = True
    crop: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flips: bool = True
    rot90: bool = True
    mixup_alpha: float = 0.3

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.crop_scale = tuple(self.crop_scale)
        self.validate()

    def validate(self) -> None:
        self.model.validate()
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.base_lr < 0 or not 0 <= self.warmup_frac <= 1:
            raise ConfigError("bad learning-rate settings")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint cadence must be >= 0")

    @property
    def effective_lr(self) -> float:
        """Linear scaling rule: base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            crop=self.crop, crop_scale=self.crop_scale, flips=self.flips, rot90=self.rot90, mixup_alpha=self.mixup_alpha
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(data)
        if "model" in data:  # a partial model section overrides the toy defaults
            data["model"] = ModelConfig.from_dict({**_default_model().to_dict(), **data["model"]})
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | os.PathLike, overrides: dict | None = None) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(merge_overrides(data, overrides or {}))


def merge_overrides(data: dict, overrides: dict) -> dict:
    """Apply flag overrides; ``model.<key>`` entries land in the nested model section."""
    out = dict(data)
    model = dict(out.get("model", {}))
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("model."):
            model[key[len("model."):]] = value
        else:
            out[key] = value
    if model:
        out["model"] = model
    return out


def seed_from_env(seed: int) -> int:
    env = os.environ.get("CROMA_SEED")
    return int(env) if env not in (None, "") else seed


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(
    path: str | os.PathLike,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    seed: int,
    step: int = 0,
    extra: dict | None = None,
) -> Path:
    out = Path(path)
    (out / "params").mkdir(parents=True, exist_ok=True)
    registry = []
    for name, p in params.items():
        fname = f"{name}.crma"
        nx.save_crma(out / "params" / fname, p.data)
        registry.append({"name": name, "shape": list(p.shape), "file": f"params/{fname}"})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model": cfg.to_dict(),
        "params": registry,
        "seed": seed,
        "step": step,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{src} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = ModelConfig.from_dict(manifest["model"])
    params = {}
    for entry in manifest["params"]:
        arr = nx.load_crma(src / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}")
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    expected = init_params(cfg, 0).keys()
    if list(expected) != list(params):
        raise ValueError("checkpoint parameters do not match the model config")
    return params, cfg, manifest


# -- pretraining ------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    metrics: list[dict]
    checkpoint: Path | None
    stats: dict


class TrainingDiverged(FloatingPointError):
    pass


def _format_row(row: dict) -> list[str]:
    return [str(row["step"])] + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]]


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={METRICS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in rows:
        w.writerow(_format_row(row))
    return buf.getvalue()


def read_metrics_csv(path: str | os.PathLike) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in reader]


def _index_stream(n: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    while True:
        yield from rng.permutation(n)


def pretrain(cfg: RunConfig, dataset: SyntheticDataset | None = None, log_every: int = 50) -> TrainResult:
    """Run the combined contrastive + masked-reconstruction pretraining."""
    seed = cfg.seed
    mcfg = cfg.model
    if dataset is None:
        if not cfg.dataset:
            raise FileNotFoundError("no dataset given")
        dataset = load_dataset(cfg.dataset)
    if dataset.size != mcfg.image_size:
        raise ConfigError(f"dataset images are {dataset.size}px but the model expects {mcfg.image_size}px")
    optical, radar = dataset.normalized()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = cfg.to_dict()
        resolved["effective_lr"] = cfg.effective_lr
        resolved["metrics_schema"] = METRICS_SCHEMA
        (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    params = init_params(mcfg, seed)
    state = OptimizerState(weight_decay=cfg.weight_decay, no_decay=no_decay_names(params))
    schedule = LrSchedule(cfg.effective_lr, cfg.warmup_frac, cfg.steps)
    stream = _index_stream(len(dataset), seed)
    aug_cfg = cfg.augment_config()
    L = mcfg.grid.L
    rows: list[dict] = []

    def checkpoint(step: int, where: Path):
        return save_checkpoint(where, params, mcfg, seed, step, {"run": cfg.to_dict(), "data_stats": dataset.stats, "world": asdict(dataset.world)})

    prev_checks = nx.set_finite_checks(False)
    try:
        for step in range(cfg.steps):
            idx = np.array([next(stream) for _ in range(cfg.batch_size)])
            o, r = optical[idx], radar[idx]
            if cfg.augment:
                aug_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA06, step]))
                o, r = augment_batch(o, r, aug_rng, aug_cfg)
            mask_base = (seed << 32) + step * cfg.batch_size
            plans = sample_batch_masks(L, mcfg.mask_ratio, mcfg.mask_policy, mask_base, range(cfg.batch_size))
            bundle, I_hat_O, I_hat_R = forward_full(o, r, plans, mcfg, params)
            sigma = temperature(mcfg, params)
            losses = combined_loss(bundle, (I_hat_O, I_hat_R), o, r, plans, mcfg, sigma)
            if not math.isfinite(losses.total.item()):
                if out_dir is not None:
                    dump = checkpoint(step, out_dir / f"crash_step_{step:06d}")
                    (dump / "batch.json").write_text(json.dumps({"indices": idx.tolist(), "mask_base": mask_base}))
                raise TrainingDiverged(f"non-finite loss at step {step}")
            losses.total.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            lr = lr_at(schedule, step)
            params = adamw_step(state, params, grads, lr)
            row = {"step": step, "lr": lr, **losses.row()}
            rows.append(row)
            if log_every and step % log_every == 0:
                log.info("step %d lr %.2e total %.4f con %.4f mae %.4f", step, lr, row["total"], losses.l_con, losses.l_mae)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step + 1, out_dir / f"checkpoint_{step + 1:06d}")
    finally:
        nx.set_finite_checks(prev_checks)

    ckpt = None
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(metrics_csv(rows))
        ckpt = checkpoint(cfg.steps, out_dir / "checkpoint")
    return TrainResult(params=params, metrics=rows, checkpoint=ckpt, stats=dataset.stats)


# -- embedding export -------------------------------------------------------

def embed_arrays(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    optical: np.ndarray,
    radar: np.ndarray,
    source: str = "O",
    batch_size: int = 64,
) -> np.ndarray:
    """Unmasked full-image pooled representations, one row per image."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    out = []
    with nx.no_grad():
        for start in range(0, optical.shape[0], batch_size):
            o = optical[start : start + batch_size]
            r = radar[start : start + batch_size]
            L = (o.shape[-1] // cfg.patch_size) * (o.shape[-2] // cfg.patch_size)
            b = encode(o, r, MaskPlan.keep_all(L), cfg, params)
            parts = {"R": [b.R_R], "O": [b.R_O], "RO": [b.R_RO], "concat": [b.R_R, b.R_O, b.R_RO]}[source]
            out.append(np.concatenate([p.data for p in parts], axis=-1))
    return np.concatenate(out, axis=0)


def embed(
    checkpoint: str | os.PathLike,
    dataset: SyntheticDataset | str | os.PathLike,
    source: str = "O",
    out: str | os.PathLike | None = None,
    split: str = "train",
):
    """Export an EmbeddingTable for ``dataset`` using the checkpoint's normalization stats."""
    params, cfg, manifest = load_checkpoint(checkpoint)
    ds = dataset if isinstance(dataset, SyntheticDataset) else load_dataset(dataset)
    stats = manifest.get("data_stats") or ds.stats
    optical, radar = ds.normalized(stats)
    table = EmbeddingTable(embed_arrays(params, cfg, optical, radar, source), ds.labels.copy(), split, source)
    if out is not None:
        table.save(out)
    return table


# -- gradient check ---------------------------------------------------------

def gradcheck(
    cfg: ModelConfig | None = None,
    batch_size: int = 4,
    seed: int = 0,
    tol: float = 1e-4,
    directions: int = 2,
    params: dict[str, Tensor] | None = None,
):
    """Finite-difference check of the full combined loss on a tiny model and synthetic batch."""
    cfg = cfg or ModelConfig.toy(patch_size=8)
    params = params or init_params(cfg, seed)
    world = SyntheticWorld(seed=seed, size=cfg.image_size)
    ds = generate(world, batch_size)
    optical, radar = ds.normalized()
    plans = sample_batch_masks(cfg.grid.L, cfg.mask_ratio, cfg.mask_policy, seed, range(batch_size))

    def f(p):
        bundle, I_hat_O, I_hat_R = forward_full(optical, radar, plans, cfg, p)
        return combined_loss(bundle, (I_hat_O, I_hat_R), optical, radar, plans, cfg, temperature(cfg, p)).total

    with nx.finite_checks(True):
        return check_gradients(f, params, h=1e-5, tol=tol, directions=directions, seed=seed)
