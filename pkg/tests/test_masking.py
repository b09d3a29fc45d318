import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from croma.masking import (
    MaskPlan,
    gather_patches,
    kept_count,
    make_rng,
    portable_permutation,
    sample_batch_masks,
    sample_mask,
    scatter_with_mask_emb,
)
from croma.numerics import Tensor


def shuffle_oracle(seed, n):
    """Fisher-Yates over PCG64 raw words, pulling words straight from the bit generator."""
    bits = np.random.PCG64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = 2**64 - (2**64 % bound)
        while True:
            w = int(bits.random_raw())
            if w < limit:
                break
        j = w % bound
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@pytest.mark.parametrize("seed, n", [(0, 10), (42, 6), (7, 196), (2**40 + 3, 36)])
def test_permutation_matches_oracle(seed, n):
    assert portable_permutation(make_rng(seed), n).tolist() == shuffle_oracle(seed, n)


def test_permutation_regression_values():
    # pinned so any change in the shuffle or the PCG64 stream is caught
    assert portable_permutation(make_rng(0), 10).tolist() == [7, 2, 8, 6, 4, 3, 5, 0, 9, 1]
    assert portable_permutation(make_rng(42), 6).tolist() == [5, 1, 3, 4, 0, 2]


def test_default_ratio_on_6x6_grid():
    plan = sample_mask(36, 0.75, "independent", make_rng(1))
    assert len(plan.kept_R) == len(plan.kept_O) == 9
    assert len(plan.masked_R) == len(plan.masked_O) == 27


@given(st.integers(2, 400), st.floats(0.01, 0.99), st.sampled_from(["independent", "shared"]), st.integers(0, 2**32))
def test_plan_partitions_each_modality(L, ratio, policy, seed):
    n_keep = kept_count(L, ratio)
    if n_keep < 1:
        with pytest.raises(ValueError):
            sample_mask(L, ratio, policy, make_rng(seed))
        return
    plan = sample_mask(L, ratio, policy, make_rng(seed))
    for kept, masked in ((plan.kept_R, plan.masked_R), (plan.kept_O, plan.masked_O)):
        assert kept == sorted(kept) and masked == sorted(masked)
        assert len(kept) == n_keep
        assert sorted(kept + masked) == list(range(L))
    if policy == "shared":
        assert plan.kept_R == plan.kept_O


def test_independent_modalities_differ_and_seed_is_deterministic():
    a = sample_mask(36, 0.75, "independent", make_rng(11))
    b = sample_mask(36, 0.75, "independent", make_rng(11))
    assert a == b
    assert a.kept_R != a.kept_O


def test_kept_count_floor():
    assert kept_count(36, 0.75) == 9
    assert kept_count(9, 0.75) == 2  # 2.25 -> 2
    assert kept_count(10, 0.5) == 5


@pytest.mark.parametrize("L, ratio, policy", [(9, 0.0, "shared"), (9, 1.0, "shared"), (1, 0.5, "shared"),
                                              (9, 0.5, "random"), (3, 0.9, "shared")])
def test_invalid_requests(L, ratio, policy):
    with pytest.raises(ValueError):
        sample_mask(L, ratio, policy, make_rng(0))


def test_batch_seeds_are_base_plus_index():
    plans = sample_batch_masks(16, 0.5, "independent", 100, [0, 3])
    assert [p.seed for p in plans] == [100, 103]
    assert plans[1] == sample_mask(16, 0.5, "independent", make_rng(103), seed=103)


def test_plan_json_roundtrip():
    plan = sample_mask(16, 0.75, "shared", make_rng(3), seed=3)
    assert MaskPlan.from_json(plan.to_json()) == plan
    full = MaskPlan.keep_all(4)
    assert full.is_full and full.kept_O == [0, 1, 2, 3]


def test_gather_and_scatter(rng):
    seq = rng.normal(size=(2, 6, 3))
    kept = np.array([[0, 4], [1, 5]])
    rows = np.stack([gather_patches(seq[b], kept[b]) for b in range(2)])
    np.testing.assert_array_equal(rows[1], seq[1, [1, 5]])
    emb = Tensor(np.array([9.0, 8.0, 7.0]))
    full = scatter_with_mask_emb(Tensor(rows), kept, 6, emb).data
    np.testing.assert_array_equal(full[0, 4], seq[0, 4])
    np.testing.assert_array_equal(full[1, 0], [9.0, 8.0, 7.0])
    assert np.sum(np.all(full == [9.0, 8.0, 7.0], axis=-1)) == 8
    with pytest.raises(IndexError):
        gather_patches(seq, [6])
