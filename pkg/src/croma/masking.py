"""MAE-style random patch masking per modality, plus gather/scatter helpers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from .numerics import Tensor, add, mul, scatter_rows

Policy = Literal["independent", "shared"]

_U64 = 1 << 64


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for a seed; masking only consumes its raw 64-bit outputs."""
    return np.random.Generator(np.random.PCG64(seed))


def _bounded(bitgen: np.random.BitGenerator, n: int) -> int:
    """Uniform integer in [0, n) by rejection on raw 64-bit words (no modulo bias)."""
    limit = _U64 - (_U64 % n)
    while True:
        word = int(bitgen.random_raw())
        if word < limit:
            return word % n


def portable_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of range(n) driven by raw PCG64 words.

    Depends only on the PCG64 output sequence, which numpy documents and keeps
    stable, not on Generator method internals.
    """
    perm = list(range(n))
    bitgen = rng.bit_generator
    for i in range(n - 1, 0, -1):
        j = _bounded(bitgen, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


@dataclass
class MaskPlan:
    L: int
    ratio: float
    policy: Policy
    kept_R: list[int]
    masked_R: list[int]
    kept_O: list[int]
    masked_O: list[int]
    seed: int | None = None

    @classmethod
    def keep_all(cls, L: int) -> "MaskPlan":
        full = list(range(L))
        return cls(L=L, ratio=0.0, policy="shared", kept_R=full, masked_R=[], kept_O=list(full), masked_O=[])

    @property
    def is_full(self) -> bool:
        return not self.masked_R and not self.masked_O

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        return cls(**json.loads(text))


def kept_count(L: int, ratio: float) -> int:
    return int(math.floor(L * (1.0 - ratio) + 1e-9))


def _split(perm: np.ndarray, n_keep: int) -> tuple[list[int], list[int]]:
    return sorted(int(i) for i in perm[:n_keep]), sorted(int(i) for i in perm[n_keep:])


def sample_mask(
    L: int,
    ratio: float,
    policy: Policy,
    rng: np.random.Generator,
    seed: int | None = None,
) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    if L < 2:
        raise ValueError("need at least 2 patches to mask")
    if policy not in ("independent", "shared"):
        raise ValueError(f"unknown mask policy {policy!r}")
    n_keep = kept_count(L, ratio)
    if n_keep < 1:
        raise ValueError(f"ratio {ratio} keeps no patches out of {L}")
    kept_R, masked_R = _split(portable_permutation(rng, L), n_keep)
    if policy == "shared":
        kept_O, masked_O = list(kept_R), list(masked_R)
    else:
        kept_O, masked_O = _split(portable_permutation(rng, L), n_keep)
    return MaskPlan(L, ratio, policy, kept_R, masked_R, kept_O, masked_O, seed)


def sample_batch_masks(L: int, ratio: float, policy: Policy, base_seed: int, indices: Sequence[int]) -> list[MaskPlan]:
    """One plan per sample, each from its own derived seed (base + sample index)."""
    plans = []
    for idx in indices:
        seed = int(base_seed) + int(idx)
        plans.append(sample_mask(L, ratio, policy, make_rng(seed), seed=seed))
    return plans


def gather_patches(seq, kept: Sequence[int]):
    """Select kept rows from (L, D) or (B, L, D) arrays."""
    idx = np.asarray(kept, dtype=np.intp)
    arr = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    if idx.size and (idx.min() < 0 or idx.max() >= arr.shape[-2]):
        raise IndexError("kept index out of range")
    return arr[..., idx, :]


def scatter_with_mask_emb(kept_seq: Tensor, kept: np.ndarray, L: int, mask_emb: Tensor) -> Tensor:
    """Place (B, K, D) rows at kept positions of a length-L sequence; fill the rest with mask_emb.

    ``kept`` is (B, K) or a single (K,) index list shared across the batch.
    """
    kept = np.asarray(kept, dtype=np.intp)
    B = kept_seq.shape[0]
    if kept.ndim == 1:
        kept = np.broadcast_to(kept, (B, kept.size))
    placed = scatter_rows(kept_seq, kept, L)
    fill = np.ones((B, L, 1))
    fill[np.arange(B)[:, None], kept] = 0.0
    return add(placed, mul(fill, mask_emb))
