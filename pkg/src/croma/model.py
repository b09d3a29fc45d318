"""Radar/optical/fusion encoders, pooled representations, projections and decoder.

All forward functions are batched: images are (B, C, H, W) arrays, patch
sequences are (B, L, D) tensors, and masking plans come one per sample. With
independent masking every sample keeps the same number of patches, so kept
sequences stack without padding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .masking import MaskPlan, scatter_with_mask_emb
from .numerics import Tensor
from .posbias import BiasStack, GridSpec, default_cache, interpolate_table, sinusoidal_2d

POS_VARIANTS = ("2d-alibi+x-alibi", "2d-alibi-only", "2d-sinusoidal")
MAE_TARGETS = ("both", "optical-only", "radar-only")
FUSION_ORDERS = ("self-cross", "cross-self")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 120
    patch_size: int = 8
    channels_r: int = 2
    channels_o: int = 12
    width: int = 64
    heads: int = 4
    depth: int = 4  # optical layers; radar and fusion get depth // 2
    mlp_ratio: int = 4
    decoder_depth: int = 1
    decoder_width: int = 512
    decoder_heads: int | None = None
    proj_dim: int | None = None
    mask_ratio: float = 0.75
    mask_policy: str = "independent"
    lambda_con: float = 1.0
    lambda_mae: float = 1.0
    pos_encoding: str = "2d-alibi+x-alibi"
    mae_target: str = "both"
    temperature_init: float = 0.07
    learn_temperature: bool = True
    fusion_order: str = "self-cross"

    def __post_init__(self):
        self.validate()

    @classmethod
    def toy(cls, patch_size: int = 8, **overrides) -> "ModelConfig":
        base = dict(image_size=24, patch_size=patch_size, width=64, heads=4, depth=4,
                    decoder_depth=1, decoder_width=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"depth must be even and >= 2, got {self.depth}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.decoder_width % self.dec_heads:
            raise ConfigError(f"decoder width {self.decoder_width} not divisible by {self.dec_heads} heads")
        if self.decoder_width % 4:
            raise ConfigError("decoder width must be divisible by 4 (2D sinusoids)")
        if self.pos_encoding not in POS_VARIANTS:
            raise ConfigError(f"unknown position encoding {self.pos_encoding!r}")
        if self.pos_encoding == "2d-sinusoidal" and self.width % 4:
            raise ConfigError("width must be divisible by 4 for 2D sinusoids")
        if self.mae_target not in MAE_TARGETS:
            raise ConfigError(f"unknown MAE target {self.mae_target!r}")
        if self.mask_policy not in ("independent", "shared"):
            raise ConfigError(f"unknown mask policy {self.mask_policy!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask ratio must be in (0, 1)")
        if self.fusion_order not in FUSION_ORDERS:
            raise ConfigError(f"unknown fusion order {self.fusion_order!r}")
        if self.temperature_init <= 0:
            raise ConfigError("temperature must be positive")
        if self.lambda_con < 0 or self.lambda_mae < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def grid(self) -> GridSpec:
        n = self.image_size // self.patch_size
        return GridSpec(n, n)

    @property
    def dec_heads(self) -> int:
        return self.decoder_heads or self.heads

    @property
    def projection_dim(self) -> int:
        return self.proj_dim or self.width

    @property
    def uses_alibi(self) -> bool:
        return self.pos_encoding != "2d-sinusoidal"

    @property
    def uses_x_alibi(self) -> bool:
        return self.pos_encoding == "2d-alibi+x-alibi"


@dataclass
class EncodingBundle:
    E_R: Tensor
    E_O: Tensor
    E_RO: Tensor
    R_R: Tensor
    R_O: Tensor
    R_RO: Tensor
    z_R: Tensor
    z_O: Tensor


# -- parameters -------------------------------------------------------------

TEMPERATURE = "temperature.log_sigma"
SIGMA_BOUNDS = (0.01, 1.0)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter registry (insertion-ordered) for ``cfg``."""
    rng = np.random.default_rng(seed)
    D, p2 = cfg.width, cfg.patch_size**2
    hidden = cfg.mlp_ratio * D
    P: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out, bias=True):
        P[f"{name}.w"] = _xavier(rng, n_in, n_out)
        if bias:
            P[f"{name}.b"] = np.zeros(n_out)

    def norm(name, n):
        P[f"{name}.g"] = np.ones(n)
        P[f"{name}.b"] = np.zeros(n)

    def attn(name, n):
        # no key bias: softmax is invariant to it, so its gradient is identically zero
        lin(f"{name}.q", n, n)
        lin(f"{name}.k", n, n, bias=False)
        lin(f"{name}.v", n, n)
        lin(f"{name}.o", n, n)

    def mlp(name, n, h):
        lin(f"{name}.fc1", n, h)
        lin(f"{name}.fc2", h, n)

    for prefix, channels, depth in (
        ("radar", cfg.channels_r, cfg.depth // 2),
        ("optical", cfg.channels_o, cfg.depth),
    ):
        lin(f"{prefix}.embed", channels * p2, D)
        for i in range(depth):
            blk = f"{prefix}.blocks.{i}"
            norm(f"{blk}.ln1", D)
            attn(f"{blk}.attn", D)
            norm(f"{blk}.ln2", D)
            mlp(f"{blk}.mlp", D, hidden)
        norm(f"{prefix}.norm", D)

    for i in range(cfg.depth // 2):
        blk = f"fusion.blocks.{i}"
        norm(f"{blk}.ln1", D)
        attn(f"{blk}.self", D)
        norm(f"{blk}.ln2", D)
        attn(f"{blk}.cross", D)
        norm(f"{blk}.ln3", D)
        mlp(f"{blk}.mlp", D, hidden)
    norm("fusion.norm", D)

    for prefix in ("pool_r", "pool_o"):
        mlp(prefix, D, D)
    lin("proj_r", D, cfg.projection_dim, bias=False)
    lin("proj_o", D, cfg.projection_dim, bias=False)

    W = cfg.decoder_width
    lin("decoder.adapter", D, W)
    P["decoder.mask_emb"] = rng.normal(0.0, 0.02, size=W)
    for i in range(cfg.decoder_depth):
        blk = f"decoder.blocks.{i}"
        norm(f"{blk}.ln1", W)
        attn(f"{blk}.attn", W)
        norm(f"{blk}.ln2", W)
        mlp(f"{blk}.mlp", W, cfg.mlp_ratio * W)
    norm("decoder.norm", W)
    lin("decoder.head", W, (cfg.channels_o + cfg.channels_r) * p2)

    if cfg.learn_temperature:
        P[TEMPERATURE] = np.array(math.log(cfg.temperature_init))

    return {k: Tensor(v, requires_grad=True, name=k) for k, v in P.items()}


def no_decay_names(params: dict[str, Tensor]) -> frozenset:
    """Parameters excluded from weight decay: vectors, scalars, mask embedding."""
    return frozenset(k for k, p in params.items() if p.ndim < 2)


def temperature(cfg: ModelConfig, params: dict[str, Tensor]):
    """Softmax temperature: exp of the clamped learnable log-temperature, or the fixed value."""
    if not cfg.learn_temperature:
        return cfg.temperature_init
    lo, hi = SIGMA_BOUNDS
    return nx.exp(nx.clamp(params[TEMPERATURE], math.log(lo), math.log(hi)))


# -- patches ----------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (L, C*patch^2), or batched (B, C, H, W) -> (B, L, C*patch^2).

    Patches are ordered row-major over the grid; each row is channel-major
    (c, dy, dx).
    """
    image = np.asarray(image, dtype=np.float64)
    batched = image.ndim == 4
    x = image if batched else image[None]
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    out = x.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * patch * patch)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, patch: int, grid: GridSpec, channels: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    B = x.shape[0]
    out = x.reshape(B, grid.rows, grid.cols, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(B, channels, grid.rows * patch, grid.cols * patch)
    return out if batched else out[0]


def image_grid(images: np.ndarray, patch: int) -> GridSpec:
    H, W = images.shape[-2:]
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch}")
    return GridSpec(H // patch, W // patch)


# -- sublayers --------------------------------------------------------------

def _lin(x: Tensor, params, name: str, bias: bool = True) -> Tensor:
    return nx.linear(x, params[f"{name}.w"], params[f"{name}.b"] if bias else None)


def _ln(x: Tensor, params, name: str) -> Tensor:
    return nx.layernorm(x, params[f"{name}.g"], params[f"{name}.b"])


def _mlp(x: Tensor, params, name: str) -> Tensor:
    return _lin(nx.gelu(_lin(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def attention(
    x_q: Tensor,
    x_kv: Tensor,
    bias: BiasStack | np.ndarray | None,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with an additive pre-softmax bias.

    Logits are (q . k) / sqrt(head_dim) + bias. ``bias`` is (H, Lq, Lk) or
    batched (B, H, Lq, Lk). Accepts (L, D) or (B, L, D) inputs.
    """
    squeeze = x_q.ndim == 2
    if squeeze:
        x_q, x_kv = nx.reshape(x_q, (1,) + x_q.shape), nx.reshape(x_kv, (1,) + x_kv.shape)
    B, Lq, D = x_q.shape
    Lk = x_kv.shape[1]
    if x_kv.shape[0] != B or x_kv.shape[2] != D:
        raise ValueError(f"attention shape mismatch: {x_q.shape} vs {x_kv.shape}")
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    dh = D // heads

    def split(t: Tensor, n: int) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(_lin(x_q, params, f"{prefix}.q"), Lq)
    k = split(_lin(x_kv, params, f"{prefix}.k", bias=False), Lk)
    v = split(_lin(x_kv, params, f"{prefix}.v"), Lk)
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dh))
    if bias is not None:
        values = bias.values if isinstance(bias, BiasStack) else np.asarray(bias)
        if values.shape[-3:] != (heads, Lq, Lk):
            raise ValueError(f"bias shape {values.shape} incompatible with ({heads}, {Lq}, {Lk})")
        scores = nx.add(scores, values)
    weights = nx.softmax_lastdim(scores)
    ctx = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (B, Lq, D))
    out = _lin(ctx, params, f"{prefix}.o")
    if squeeze:
        out = nx.reshape(out, (Lq, D))
    return (out, weights) if return_weights else out


def _batched_bias(grid: GridSpec, heads: int, rows: np.ndarray, cols: np.ndarray, kind: str) -> np.ndarray:
    """(H, Lq, Lk) when every sample keeps the full grid, else (B, H, Lq, Lk)."""
    full = np.arange(grid.L)
    if rows.shape[1] == grid.L and cols.shape[1] == grid.L:
        return default_cache.get(grid, heads, kind=kind).values
    stacks = []
    for r, c in zip(rows, cols):
        r_key = None if r.size == grid.L and np.array_equal(r, full) else r
        c_key = None if c.size == grid.L and np.array_equal(c, full) else c
        stacks.append(default_cache.get(grid, heads, r_key, c_key, kind=kind).values)
    return np.stack(stacks)


def _kept_matrix(plans: Sequence[MaskPlan], which: str) -> np.ndarray:
    rows = [getattr(p, which) for p in plans]
    sizes = {len(r) for r in rows}
    if len(sizes) != 1:
        raise ValueError("all plans in a batch must keep the same number of patches")
    return np.asarray(rows, dtype=np.intp).reshape(len(plans), sizes.pop())


def _normalize_plans(plans, B: int, L: int) -> list[MaskPlan]:
    if plans is None:
        plans = MaskPlan.keep_all(L)
    if isinstance(plans, MaskPlan):
        plans = [plans] * B
    plans = list(plans)
    if len(plans) != B:
        raise ValueError(f"{len(plans)} mask plans for a batch of {B}")
    for p in plans:
        if p.L != L:
            raise ValueError(f"mask plan covers {p.L} patches but the image has {L}")
    return plans


def position_table(cfg: ModelConfig, grid: GridSpec, interp_from: GridSpec | None = None) -> np.ndarray:
    """Absolute 2D sinusoids for the sinusoidal variant, optionally resized from a training grid."""
    if interp_from is None or interp_from == grid:
        return sinusoidal_2d(grid, cfg.width)
    return interpolate_table(sinusoidal_2d(interp_from, cfg.width), interp_from, grid)


# -- encoders ---------------------------------------------------------------

def _encode_unimodal(
    images: np.ndarray,
    kept: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    prefix: str,
    depth: int,
    interp_from: GridSpec | None = None,
) -> Tensor:
    grid = image_grid(images, cfg.patch_size)
    patches = patchify(images, cfg.patch_size)
    batch = np.arange(patches.shape[0])[:, None]
    x = _lin(Tensor(patches[batch, kept]), params, f"{prefix}.embed")
    bias = None
    if cfg.uses_alibi:
        bias = _batched_bias(grid, cfg.heads, kept, kept, "self")
    else:
        x = nx.add(x, position_table(cfg, grid, interp_from)[kept])
    for i in range(depth):
        blk = f"{prefix}.blocks.{i}"
        h = _ln(x, params, f"{blk}.ln1")
        x = nx.add(x, attention(h, h, bias, params, f"{blk}.attn", cfg.heads))
        x = nx.add(x, _mlp(_ln(x, params, f"{blk}.ln2"), params, f"{blk}.mlp"))
    return _ln(x, params, f"{prefix}.norm")


def _as_batch(images: np.ndarray, channels: int, name: str) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != channels:
        raise ValueError(f"{name} images must be (B, {channels}, H, W), got {images.shape}")
    return images


def encode_radar(images, plans, cfg: ModelConfig, params, interp_from: GridSpec | None = None) -> Tensor:
    images = _as_batch(images, cfg.channels_r, "radar")
    grid = image_grid(images, cfg.patch_size)
    plans = _normalize_plans(plans, images.shape[0], grid.L)
    return _encode_unimodal(images, _kept_matrix(plans, "kept_R"), cfg, params, "radar", cfg.depth // 2, interp_from)


def encode_optical(images, plans, cfg: ModelConfig, params, interp_from: GridSpec | None = None) -> Tensor:
    images = _as_batch(images, cfg.channels_o, "optical")
    grid = image_grid(images, cfg.patch_size)
    plans = _normalize_plans(plans, images.shape[0], grid.L)
    return _encode_unimodal(images, _kept_matrix(plans, "kept_O"), cfg, params, "optical", cfg.depth, interp_from)


def encode_fusion(E_R: Tensor, E_O: Tensor, plans, grid: GridSpec, cfg: ModelConfig, params) -> Tensor:
    """Radar-stream transformer that cross-attends to optical encodings; output length |kept_R|."""
    B = E_R.shape[0]
    plans = _normalize_plans(plans, B, grid.L)
    kept_R = _kept_matrix(plans, "kept_R")
    kept_O = _kept_matrix(plans, "kept_O")
    if E_R.shape[1] != kept_R.shape[1] or E_O.shape[1] != kept_O.shape[1]:
        raise ValueError("encodings do not match the mask plan")
    self_bias = cross_bias = None
    if cfg.uses_alibi:
        self_bias = _batched_bias(grid, cfg.heads, kept_R, kept_R, "self")
    if cfg.uses_x_alibi:
        cross_bias = _batched_bias(grid, cfg.heads, kept_R, kept_O, "cross")

    x = E_R
    for i in range(cfg.depth // 2):
        blk = f"fusion.blocks.{i}"

        def self_step(x):
            h = _ln(x, params, f"{blk}.ln1")
            return nx.add(x, attention(h, h, self_bias, params, f"{blk}.self", cfg.heads))

        def cross_step(x):
            h = _ln(x, params, f"{blk}.ln2")
            return nx.add(x, attention(h, E_O, cross_bias, params, f"{blk}.cross", cfg.heads))

        if cfg.fusion_order == "self-cross":
            x = cross_step(self_step(x))
        else:
            x = self_step(cross_step(x))
        x = nx.add(x, _mlp(_ln(x, params, f"{blk}.ln3"), params, f"{blk}.mlp"))
    return _ln(x, params, "fusion.norm")


def pooled_representations(E_R: Tensor, E_O: Tensor, E_RO: Tensor, params):
    """R_R, R_O via modality FFNs over the mean patch encoding; R_RO is the plain mean."""
    for name, e in (("E_R", E_R), ("E_O", E_O), ("E_RO", E_RO)):
        if e.shape[-2] == 0:
            raise ValueError(f"{name} is empty")
    R_R = _mlp(nx.tmean(E_R, axis=-2), params, "pool_r")
    R_O = pool_optical(E_O, params)
    R_RO = nx.tmean(E_RO, axis=-2)
    return R_R, R_O, R_RO


def pool_optical(E_O: Tensor, params) -> Tensor:
    """R_O alone, for evaluations that never touch the radar stream."""
    return _mlp(nx.tmean(E_O, axis=-2), params, "pool_o")


def project(R_R: Tensor, R_O: Tensor, params):
    z_R = nx.l2_normalize(nx.linear(R_R, params["proj_r.w"]))
    z_O = nx.l2_normalize(nx.linear(R_O, params["proj_o.w"]))
    return z_R, z_O


def decode(E_RO: Tensor, plans, grid: GridSpec, cfg: ModelConfig, params):
    """Reconstruct every patch of both sensors from the fused radar-stream encodings.

    Returns (optical (B, L, C_O*p^2), radar (B, L, C_R*p^2)).
    """
    B = E_RO.shape[0]
    plans = _normalize_plans(plans, B, grid.L)
    kept_R = _kept_matrix(plans, "kept_R")
    if E_RO.shape[1] != kept_R.shape[1]:
        raise ValueError("fused encodings do not match the mask plan")
    h = _lin(E_RO, params, "decoder.adapter")
    x = scatter_with_mask_emb(h, kept_R, grid.L, params["decoder.mask_emb"])
    x = nx.add(x, sinusoidal_2d(grid, cfg.decoder_width))
    for i in range(cfg.decoder_depth):
        blk = f"decoder.blocks.{i}"
        a = _ln(x, params, f"{blk}.ln1")
        x = nx.add(x, attention(a, a, None, params, f"{blk}.attn", cfg.dec_heads))
        x = nx.add(x, _mlp(_ln(x, params, f"{blk}.ln2"), params, f"{blk}.mlp"))
    out = _lin(_ln(x, params, "decoder.norm"), params, "decoder.head")
    split = cfg.channels_o * cfg.patch_size**2
    return out[..., :split], out[..., split:]


def encode(optical, radar, plans, cfg: ModelConfig, params, interp_from: GridSpec | None = None) -> EncodingBundle:
    optical = _as_batch(optical, cfg.channels_o, "optical")
    radar = _as_batch(radar, cfg.channels_r, "radar")
    if optical.shape[0] != radar.shape[0] or optical.shape[2:] != radar.shape[2:]:
        raise ValueError("radar and optical batches are not aligned")
    grid = image_grid(optical, cfg.patch_size)
    plans = _normalize_plans(plans, optical.shape[0], grid.L)
    E_R = encode_radar(radar, plans, cfg, params, interp_from)
    E_O = encode_optical(optical, plans, cfg, params, interp_from)
    E_RO = encode_fusion(E_R, E_O, plans, grid, cfg, params)
    R_R, R_O, R_RO = pooled_representations(E_R, E_O, E_RO, params)
    z_R, z_O = project(R_R, R_O, params)
    return EncodingBundle(E_R, E_O, E_RO, R_R, R_O, R_RO, z_R, z_O)


def forward_full(optical, radar, plans, cfg: ModelConfig, params):
    """Encode both sensors, fuse, pool, project and decode in one graph.

    Returns (EncodingBundle, optical reconstruction, radar reconstruction).
    """
    optical = _as_batch(optical, cfg.channels_o, "optical")
    grid = image_grid(optical, cfg.patch_size)
    plans = _normalize_plans(plans, optical.shape[0], grid.L)
    bundle = encode(optical, radar, plans, cfg, params)
    I_hat_O, I_hat_R = decode(bundle.E_RO, plans, grid, cfg, params)
    return bundle, I_hat_O, I_hat_R
