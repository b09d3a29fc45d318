"""Synthetic co-registered radar/optical pairs driven by one shared latent field.

Each sample draws a smooth scalar field z (a global offset plus box-blurred
white noise). Optical channels mix smooth features of z with additive noise;
radar channels mix a different nonlinearity of z under multiplicative
log-normal speckle. Image classes come from the field mean, per-pixel bands
from fixed thresholds on z, so every label is a function of z alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np
from scipy.ndimage import uniform_filter

from .numerics import load_crma, save_crma


@dataclass(frozen=True)
class SyntheticWorld:
    seed: int = 0
    size: int = 24
    n_classes: int = 4
    blur: int | None = None  # box width in pixels; defaults to size // 4
    offset_scale: float = 1.0
    optical_noise: float = 0.1
    speckle: float = 0.25
    channels_o: int = 12
    channels_r: int = 2

    @property
    def blur_width(self) -> int:
        return self.blur if self.blur is not None else max(1, self.size // 4)

    def mixing(self) -> tuple[np.ndarray, np.ndarray]:
        """(A_O, A_R) feature-mixing matrices, fixed by the world seed."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0FFEE]))
        A_O = rng.normal(0.0, 0.5, size=(self.channels_o, 4))
        A_O[:, 0] = np.abs(rng.normal(1.0, 0.3, size=self.channels_o))
        A_R = rng.normal(0.0, 0.5, size=(self.channels_r, 4))
        A_R[:, 0] = np.abs(rng.normal(1.0, 0.3, size=self.channels_r))
        return A_O, A_R

    def class_thresholds(self, size: int | None = None) -> np.ndarray:
        size = size or self.size
        b = self.blur_width
        std = float(np.sqrt(self.offset_scale**2 + (b / size) ** 2))
        nd = NormalDist(0.0, std)
        return np.array([nd.inv_cdf(k / self.n_classes) for k in range(1, self.n_classes)])

    def band_thresholds(self) -> np.ndarray:
        nd = NormalDist(0.0, float(np.sqrt(self.offset_scale**2 + 1.0)))
        return np.array([nd.inv_cdf(k / self.n_classes) for k in range(1, self.n_classes)])


def optical_features(z: np.ndarray) -> np.ndarray:
    return np.stack([z, np.tanh(z), z * z - 1.0, np.sin(1.5 * z)])


def radar_features(z: np.ndarray) -> np.ndarray:
    return np.stack([np.logaddexp(0.0, z), np.tanh(2.0 * z), np.abs(z), np.cos(z)])


@dataclass
class PairedSample:
    optical: np.ndarray  # (C_O, S, S)
    radar: np.ndarray  # (C_R, S, S)
    label: int
    bands: np.ndarray  # (S, S) integer band per pixel


@dataclass
class SyntheticDataset:
    optical: np.ndarray  # (n, C_O, S, S)
    radar: np.ndarray  # (n, C_R, S, S)
    labels: np.ndarray  # (n,)
    bands: np.ndarray  # (n, S, S)
    world: SyntheticWorld
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(self.optical[i], self.radar[i], int(self.labels[i]), self.bands[i])

    @property
    def size(self) -> int:
        return self.optical.shape[-1]

    def normalized(self, stats: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel standardized (optical, radar), using ``stats`` or this set's own."""
        s = stats or self.stats
        o = (self.optical - np.asarray(s["optical_mean"])[:, None, None]) / np.asarray(s["optical_std"])[:, None, None]
        r = (self.radar - np.asarray(s["radar_mean"])[:, None, None]) / np.asarray(s["radar_std"])[:, None, None]
        return o, r

    def segment_labels(self, patch: int) -> np.ndarray:
        """(n, L) dominant band per patch, row-major; ties go to the lower band."""
        n, S, _ = self.bands.shape
        g = S // patch
        blocks = self.bands.reshape(n, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(n, g * g, -1)
        counts = np.stack([(blocks == c).sum(axis=-1) for c in range(self.world.n_classes)], axis=-1)
        return counts.argmax(axis=-1)


def channel_stats(optical: np.ndarray, radar: np.ndarray) -> dict:
    return {
        "optical_mean": optical.mean(axis=(0, 2, 3)).tolist(),
        "optical_std": optical.std(axis=(0, 2, 3)).tolist(),
        "radar_mean": radar.mean(axis=(0, 2, 3)).tolist(),
        "radar_std": radar.std(axis=(0, 2, 3)).tolist(),
    }


def latent_field(world: SyntheticWorld, rng: np.random.Generator, size: int) -> np.ndarray:
    b = world.blur_width
    white = rng.normal(size=(size, size))
    local = uniform_filter(white, size=b, mode="wrap") * b  # unit pixel variance
    return world.offset_scale * rng.normal() + local


def generate_sample(world: SyntheticWorld, index: int, size: int | None = None) -> PairedSample:
    size = size or world.size
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, int(index)]))
    A_O, A_R = world.mixing()
    z = latent_field(world, rng, size)
    optical = np.tensordot(A_O, optical_features(z), axes=1)
    optical = optical + world.optical_noise * rng.normal(size=optical.shape)
    radar = np.tensordot(A_R, radar_features(z), axes=1)
    s = world.speckle
    radar = radar * np.exp(s * rng.normal(size=radar.shape) - 0.5 * s * s)
    label = int(np.searchsorted(world.class_thresholds(size), z.mean()))
    bands = np.searchsorted(world.band_thresholds(), z).astype(np.int64)
    return PairedSample(optical, radar, label, bands)


def generate(world: SyntheticWorld, n: int, size: int | None = None, start: int = 0) -> SyntheticDataset:
    """Samples ``start .. start+n-1``; each index has its own derived seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [generate_sample(world, start + i, size) for i in range(n)]
    optical = np.stack([s.optical for s in samples])
    radar = np.stack([s.radar for s in samples])
    return SyntheticDataset(
        optical=optical,
        radar=radar,
        labels=np.array([s.label for s in samples], dtype=np.int64),
        bands=np.stack([s.bands for s in samples]),
        world=world,
        stats=channel_stats(optical, radar),
    )


def save_dataset(ds: SyntheticDataset, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_crma(out / "optical.crma", ds.optical)
    save_crma(out / "radar.crma", ds.radar)
    save_crma(out / "bands.crma", ds.bands.astype(np.float64))
    meta = {
        "format": "croma-dataset/1",
        "world": asdict(ds.world),
        "labels": ds.labels.tolist(),
        "stats": ds.stats,
        "size": ds.size,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_dataset(path: str | os.PathLike) -> SyntheticDataset:
    src = Path(path)
    meta_path = src / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {src}")
    meta = json.loads(meta_path.read_text())
    return SyntheticDataset(
        optical=load_crma(src / "optical.crma"),
        radar=load_crma(src / "radar.crma"),
        labels=np.asarray(meta["labels"], dtype=np.int64),
        bands=load_crma(src / "bands.crma").astype(np.int64),
        world=SyntheticWorld(**meta["world"]),
        stats=meta["stats"],
    )


# -- paired augmentation ----------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)  # crop side as a fraction of the image side
    flips: bool = True
    rot90: bool = True
    mixup_alpha: float = 0.3  # 0 disables mixup


@dataclass(frozen=True)
class Geometry:
    crop: tuple[int, int, int] | None  # (top, left, side)
    hflip: bool
    vflip: bool
    k: int  # quarter turns


def draw_geometry(rng: np.random.Generator, size: int, cfg: AugmentConfig) -> Geometry:
    """One set of geometric draws, to be shared by both modalities."""
    crop = None
    if cfg.crop:
        lo, hi = cfg.crop_scale
        if hi > 1.0 or lo <= 0 or lo > hi:
            raise ValueError(f"crop scale {cfg.crop_scale} must satisfy 0 < lo <= hi <= 1")
        side = max(1, int(round(size * rng.uniform(lo, hi))))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        crop = (top, left, side)
    hflip = bool(cfg.flips and rng.random() < 0.5)
    vflip = bool(cfg.flips and rng.random() < 0.5)
    k = int(rng.integers(0, 4)) if cfg.rot90 else 0
    return Geometry(crop, hflip, vflip, k)


def apply_geometry(x: np.ndarray, geo: Geometry) -> np.ndarray:
    """Crop + nearest-neighbour resize back to size, flips, then quarter turns on the last two axes."""
    size = x.shape[-1]
    if geo.crop is not None:
        top, left, side = geo.crop
        if top + side > x.shape[-2] or left + side > size:
            raise ValueError("crop larger than image")
        idx = np.floor((np.arange(size) + 0.5) * side / size).astype(np.intp)
        x = x[..., top + idx, :][..., left + idx]
    if geo.hflip:
        x = x[..., :, ::-1]
    if geo.vflip:
        x = x[..., ::-1, :]
    if geo.k:
        x = np.rot90(x, geo.k, axes=(-2, -1))
    return np.ascontiguousarray(x)


def augment_pair(sample: PairedSample, rng: np.random.Generator, cfg: AugmentConfig) -> PairedSample:
    """Identical geometric transform for radar, optical and the band map."""
    geo = draw_geometry(rng, sample.optical.shape[-1], cfg)
    return PairedSample(
        apply_geometry(sample.optical, geo),
        apply_geometry(sample.radar, geo),
        sample.label,
        apply_geometry(sample.bands, geo),
    )


def mixup(a: PairedSample, b: PairedSample, lam: float) -> PairedSample:
    """Blend inputs of two pairs with the same weight for both sensors; labels stay with ``a``."""
    return PairedSample(
        lam * a.optical + (1.0 - lam) * b.optical,
        lam * a.radar + (1.0 - lam) * b.radar,
        a.label,
        a.bands,
    )


def augment_batch(
    optical: np.ndarray, radar: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample shared geometry, then mixup of each sample with its mirror in the batch."""
    B = optical.shape[0]
    out_o = np.empty_like(optical)
    out_r = np.empty_like(radar)
    for i in range(B):
        geo = draw_geometry(rng, optical.shape[-1], cfg)
        out_o[i] = apply_geometry(optical[i], geo)
        out_r[i] = apply_geometry(radar[i], geo)
    if cfg.mixup_alpha > 0 and B > 1:
        lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=B)[:, None, None, None]
        out_o = lam * out_o + (1.0 - lam) * out_o[::-1]
        out_r = lam * out_r + (1.0 - lam) * out_r[::-1]
    return out_o, out_r
