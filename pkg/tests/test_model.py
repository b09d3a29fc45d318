import math

import numpy as np
import pytest

from croma import numerics as nx
from croma.evalkit import invariance_diagnostic
from croma.masking import MaskPlan, make_rng, sample_batch_masks, sample_mask
from croma.model import (
    ConfigError,
    ModelConfig,
    attention,
    encode,
    forward_full,
    init_params,
    no_decay_names,
    patchify,
    temperature,
    unpatchify,
)
from croma.numerics import Tensor
from croma.posbias import GridSpec, build_2d_alibi


def count_oracle(cfg: ModelConfig) -> int:
    """Parameter count written out from the architecture description."""
    D, W, p2 = cfg.width, cfg.decoder_width, cfg.patch_size**2
    attn = lambda n: 4 * n * n + 3 * n  # q, v, o biased; k unbiased
    ln = lambda n: 2 * n
    mlp = lambda n, h: n * h + h + h * n + n
    block = lambda n: ln(n) + attn(n) + ln(n) + mlp(n, cfg.mlp_ratio * n)
    total = 0
    total += cfg.channels_o * p2 * D + D + cfg.depth * block(D) + ln(D)
    total += cfg.channels_r * p2 * D + D + cfg.depth // 2 * block(D) + ln(D)
    total += cfg.depth // 2 * (3 * ln(D) + 2 * attn(D) + mlp(D, cfg.mlp_ratio * D)) + ln(D)
    total += 2 * mlp(D, D) + 2 * D * cfg.projection_dim
    total += D * W + W + W + cfg.decoder_depth * block(W) + ln(W)
    total += W * (cfg.channels_o + cfg.channels_r) * p2 + (cfg.channels_o + cfg.channels_r) * p2
    return total + 1  # log temperature


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig.toy(patch_size=8)
    return cfg, init_params(cfg, 0)


@pytest.fixture(scope="module")
def batch():
    r = np.random.default_rng(0)
    return r.normal(size=(2, 12, 24, 24)), r.normal(size=(2, 2, 24, 24))


@pytest.mark.parametrize("patch", [4, 8])
def test_parameter_count_matches_architecture(patch):
    cfg = ModelConfig.toy(patch_size=patch)
    params = init_params(cfg, 0)
    assert sum(p.size for p in params.values()) == count_oracle(cfg)


def test_toy_config_size(toy):
    cfg, params = toy
    assert (cfg.width, cfg.heads, cfg.depth, cfg.grid) == (64, 4, 4, GridSpec(3, 3))
    assert sum(p.size for p in params.values()) == 559_873


def test_init_is_seeded(toy):
    cfg, params = toy
    again = init_params(cfg, 0)
    other = init_params(cfg, 1)
    assert all(np.array_equal(params[k].data, again[k].data) for k in params)
    assert not np.array_equal(params["optical.embed.w"].data, other["optical.embed.w"].data)
    assert "optical.blocks.0.attn.k.b" not in params


def test_no_decay_covers_vectors_and_scalars(toy):
    _, params = toy
    nd = no_decay_names(params)
    assert "temperature.log_sigma" in nd and "decoder.mask_emb" in nd and "optical.norm.g" in nd
    assert "optical.embed.w" not in nd


@pytest.mark.parametrize(
    "overrides",
    [dict(image_size=25), dict(depth=3), dict(heads=3), dict(pos_encoding="rope"),
     dict(mae_target="all"), dict(mask_ratio=1.0), dict(fusion_order="x"), dict(decoder_width=30)],
)
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        ModelConfig.toy(**overrides)


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = ModelConfig.toy(patch_size=4, mask_policy="shared")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"widht": 32})


def test_temperature_init_and_clamp(toy):
    cfg, params = toy
    assert temperature(cfg, params).item() == pytest.approx(0.07)
    p = dict(params)
    p["temperature.log_sigma"] = Tensor(np.array(5.0))
    assert temperature(cfg, p).item() == pytest.approx(1.0)
    p["temperature.log_sigma"] = Tensor(np.array(-9.0))
    assert temperature(cfg, p).item() == pytest.approx(0.01)
    assert temperature(ModelConfig.toy(learn_temperature=False), params) == 0.07


def test_patchify_layout_and_roundtrip(rng):
    img = rng.normal(size=(3, 4, 6))
    patches = patchify(img, 2)
    assert patches.shape == (6, 12)
    # patch 4 is grid (1, 1); its entry (c=2, dy=1, dx=0) sits at 2*4 + 1*2 + 0
    assert patches[4, 10] == img[2, 3, 2]
    np.testing.assert_array_equal(unpatchify(patches, 2, GridSpec(2, 3), 3), img)
    batched = rng.normal(size=(2, 3, 4, 6))
    np.testing.assert_array_equal(unpatchify(patchify(batched, 2), 2, GridSpec(2, 3), 3), batched)
    with pytest.raises(ValueError):
        patchify(img, 4)


def test_attention_rows_sum_to_one_and_bias_applies(toy):
    cfg, params = toy
    x = Tensor(np.random.default_rng(2).normal(size=(9, 64)))
    bias = build_2d_alibi(GridSpec(3, 3), 4)
    _, w = attention(x, x, bias, params, "optical.blocks.0.attn", 4, return_weights=True)
    w = w.data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    _, w0 = attention(x, x, None, params, "optical.blocks.0.attn", 4, return_weights=True)
    assert not np.allclose(w, w0.data)


def test_attention_scaling_by_inverse_sqrt_head_dim():
    D, H = 8, 2
    eye = {f"a.{n}.w": Tensor(np.eye(D)) for n in "qkvo"}
    eye.update({f"a.{n}.b": Tensor(np.zeros(D)) for n in "qvo"})
    x = np.random.default_rng(3).normal(size=(3, D))
    _, w = attention(Tensor(x), Tensor(x), None, eye, "a", H, return_weights=True)
    dh = D // H
    q = x[:, :dh]
    logits = q @ q.T / math.sqrt(dh)
    ref = np.exp(logits - logits.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    np.testing.assert_allclose(w.data[0, 0], ref, atol=1e-13)  # (batch, head, Lq, Lk)


def test_forward_shapes(toy, batch):
    cfg, params = toy
    optical, radar = batch
    plans = sample_batch_masks(9, 0.75, "independent", 0, range(2))
    bundle, I_O, I_R = forward_full(optical, radar, plans, cfg, params)
    assert bundle.E_O.shape == (2, 2, 64) and bundle.E_R.shape == (2, 2, 64) and bundle.E_RO.shape == (2, 2, 64)
    assert bundle.R_O.shape == (2, 64) and bundle.z_R.shape == (2, 64)
    np.testing.assert_allclose(np.linalg.norm(bundle.z_O.data, axis=-1), 1.0, atol=1e-12)
    assert I_O.shape == (2, 9, 12 * 64) and I_R.shape == (2, 9, 2 * 64)


def _pixels_of(patches, patch, grid_cols):
    mask = np.zeros((grid_cols * patch, grid_cols * patch), dtype=bool)
    for j in patches:
        r, c = divmod(j, grid_cols)
        mask[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = True
    return mask


@pytest.mark.parametrize("pos", ["2d-alibi+x-alibi", "2d-sinusoidal"])
def test_masked_pixels_do_not_leak(pos, batch):
    cfg = ModelConfig.toy(patch_size=8, pos_encoding=pos)
    params = init_params(cfg, 0)
    optical, radar = batch
    plans = [sample_mask(9, 0.75, "independent", make_rng(s)) for s in (5, 6)]
    base = encode(optical, radar, plans, cfg, params)
    o2, r2 = optical.copy(), radar.copy()
    for b, plan in enumerate(plans):
        o2[b][:, _pixels_of(plan.masked_O, 8, 3)] += 100.0
        r2[b][:, _pixels_of(plan.masked_R, 8, 3)] -= 50.0
    moved = encode(o2, r2, plans, cfg, params)
    for name in ("E_R", "E_O", "E_RO", "R_R", "R_O", "R_RO", "z_R", "z_O"):
        np.testing.assert_array_equal(getattr(moved, name).data, getattr(base, name).data)
    o3 = optical.copy()
    o3[0][:, _pixels_of(plans[0].kept_O, 8, 3)] += 1.0
    assert not np.array_equal(encode(o3, radar, plans, cfg, params).E_RO.data, base.E_RO.data)


def test_batch_rows_are_independent(toy, batch):
    cfg, params = toy
    optical, radar = batch
    plans = sample_batch_masks(9, 0.75, "independent", 3, range(2))
    both = encode(optical, radar, plans, cfg, params)
    one = encode(optical[1:], radar[1:], plans[1:], cfg, params)
    np.testing.assert_allclose(both.E_RO.data[1:], one.E_RO.data, atol=1e-13)


def test_keep_all_plan_is_the_default(toy, batch):
    cfg, params = toy
    optical, radar = batch
    a = encode(optical, radar, None, cfg, params)
    b = encode(optical, radar, MaskPlan.keep_all(9), cfg, params)
    np.testing.assert_array_equal(a.R_RO.data, b.R_RO.data)
    assert a.E_O.shape == (2, 9, 64)


@pytest.mark.parametrize("pos", ["2d-alibi+x-alibi", "2d-alibi-only"])
def test_alibi_encoder_is_rotation_invariant_at_pixel_patches(pos):
    cfg = ModelConfig.toy(patch_size=1, image_size=6, pos_encoding=pos)
    params = init_params(cfg, 0)
    optical = np.random.default_rng(9).normal(size=(3, 12, 6, 6))
    inv = invariance_diagnostic(params, cfg, optical, transforms=("identity", "rot90", "rot180", "hflip", "vflip"))
    assert inv["identity"] == 1.0
    for name, value in inv.items():
        assert abs(value - 1.0) < 1e-9, name


def test_sinusoidal_encoder_is_not_rotation_invariant():
    cfg = ModelConfig.toy(patch_size=1, image_size=6, pos_encoding="2d-sinusoidal")
    params = init_params(cfg, 0)
    optical = np.random.default_rng(9).normal(size=(3, 12, 6, 6))
    assert invariance_diagnostic(params, cfg, optical, transforms=("rot90",))["rot90"] < 1.0 - 1e-6


@pytest.mark.parametrize("pos", ["2d-alibi+x-alibi", "2d-sinusoidal"])
def test_runs_on_larger_grid_unmodified(pos):
    cfg = ModelConfig.toy(patch_size=8, pos_encoding=pos)
    params = init_params(cfg, 0)
    r = np.random.default_rng(1)
    with nx.no_grad():
        b = encode(r.normal(size=(1, 12, 48, 40)), r.normal(size=(1, 2, 48, 40)), None, cfg, params,
                   interp_from=cfg.grid)
    assert b.E_O.shape == (1, 30, 64) and np.all(np.isfinite(b.z_O.data))


def test_fusion_order_and_shared_policy(batch):
    optical, radar = batch
    plans = sample_batch_masks(9, 0.5, "shared", 0, range(2))
    outs = []
    for order in ("self-cross", "cross-self"):
        cfg = ModelConfig.toy(fusion_order=order, mask_policy="shared", mask_ratio=0.5)
        outs.append(encode(optical, radar, plans, cfg, init_params(cfg, 0)).E_RO.data)
    assert not np.allclose(*outs)


def test_misaligned_inputs_rejected(toy):
    cfg, params = toy
    with pytest.raises(ValueError):
        encode(np.zeros((2, 12, 24, 24)), np.zeros((1, 2, 24, 24)), None, cfg, params)
    with pytest.raises(ValueError):
        encode(np.zeros((1, 3, 24, 24)), np.zeros((1, 2, 24, 24)), None, cfg, params)
