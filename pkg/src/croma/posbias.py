"""Distance-based attention biases for 2D patch grids (self- and cross-attention).

Every head penalizes attention logits by ``slope * euclidean_distance`` between
the query patch and the key patch, measured in patch units on a row-major
flattened grid. Cross-modal biases for spatially aligned sensors reuse the same
matrix. Masked patches are handled by selecting the kept rows and columns.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid extents must be >= 1, got {self.rows}x{self.cols}")

    @property
    def L(self) -> int:
        return self.rows * self.cols

    def coords(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.L:
            raise IndexError(f"patch index {index} out of range for {self.rows}x{self.cols} grid")
        return divmod(index, self.cols)

    def coord_array(self) -> np.ndarray:
        """(L, 2) array of (row, col) per flattened index."""
        idx = np.arange(self.L)
        return np.stack([idx // self.cols, idx % self.cols], axis=1).astype(np.float64)


@dataclass(frozen=True)
class BiasStack:
    values: np.ndarray  # (heads, Lq, Lk), all entries <= 0
    slopes: np.ndarray
    kind: Literal["self", "cross"] = "self"

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def distances(self) -> np.ndarray:
        """Recover the (Lq, Lk) distance matrix by dividing out the first slope."""
        return -self.values[0] / self.slopes[0] + 0.0  # + 0.0 turns -0.0 into 0.0


def slopes(n_heads: int) -> np.ndarray:
    """Geometric slope sequence 2^(-8h/n) for h = 1..n."""
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    h = np.arange(1, n_heads + 1, dtype=np.float64)
    return np.exp2(-8.0 * h / n_heads)


def grid_distance(spec: GridSpec, i: int, j: int) -> float:
    ri, ci = spec.coords(i)
    rj, cj = spec.coords(j)
    return math.hypot(ri - rj, ci - cj)


def distance_matrix(spec: GridSpec, rows_idx=None, cols_idx=None) -> np.ndarray:
    coords = spec.coord_array()
    q = coords if rows_idx is None else coords[np.asarray(rows_idx, dtype=np.intp)]
    k = coords if cols_idx is None else coords[np.asarray(cols_idx, dtype=np.intp)]
    diff = q[:, None, :] - k[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _stack_from_distances(dist: np.ndarray, n_heads: int, kind: str) -> BiasStack:
    m = slopes(n_heads)
    values = -dist[None, :, :] * m[:, None, None]
    values = values + 0.0  # normalize -0.0 on the diagonal
    values.setflags(write=False)
    return BiasStack(values=values, slopes=m, kind=kind)


def build_2d_alibi(spec: GridSpec, n_heads: int) -> BiasStack:
    return _stack_from_distances(distance_matrix(spec), n_heads, "self")


def build_x_alibi(spec: GridSpec, n_heads: int) -> BiasStack:
    """Cross-attention bias between two aligned sensors: same values, tagged ``cross``.

    Rows index the query modality's patches, columns the key modality's.
    """
    return _stack_from_distances(distance_matrix(spec), n_heads, "cross")


def _check_index_set(idx: Sequence[int], limit: int, what: str) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.intp).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        raise IndexError(f"{what} index out of range [0, {limit})")
    if arr.size > 1 and np.any(np.diff(arr) <= 0):
        if np.unique(arr).size != arr.size:
            raise ValueError(f"duplicate {what} indices")
        raise ValueError(f"{what} indices must be sorted ascending")
    return arr


def mask_bias(stack: BiasStack, kept_rows: Sequence[int], kept_cols: Sequence[int]) -> BiasStack:
    """Drop masked-out query rows and key columns from every head."""
    r = _check_index_set(kept_rows, stack.values.shape[1], "row")
    c = _check_index_set(kept_cols, stack.values.shape[2], "column")
    values = stack.values[:, r][:, :, c]
    values.setflags(write=False)
    return BiasStack(values=values, slopes=stack.slopes, kind=stack.kind)


class BiasCache:
    """Memo of masked bias stacks keyed by grid, heads, kind and kept sets.

    Reads are lock-free; inserts take a lock. Stored arrays are read-only.
    """

    def __init__(self, max_entries: int = 4096):
        self.max_entries = max_entries
        self._store: dict[tuple, BiasStack] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(
        self,
        spec: GridSpec,
        n_heads: int,
        kept_rows: Sequence[int] | None = None,
        kept_cols: Sequence[int] | None = None,
        kind: Literal["self", "cross"] = "self",
    ) -> BiasStack:
        rk = None if kept_rows is None else tuple(int(i) for i in kept_rows)
        ck = None if kept_cols is None else tuple(int(i) for i in kept_cols)
        key = (spec.rows, spec.cols, n_heads, kind, rk, ck)
        hit = self._store.get(key)
        if hit is not None:
            self.hits += 1
            return hit
        self.misses += 1
        full_key = (spec.rows, spec.cols, n_heads, kind, None, None)
        full = self._store.get(full_key)
        if full is None:
            full = build_2d_alibi(spec, n_heads) if kind == "self" else build_x_alibi(spec, n_heads)
        out = full
        if rk is not None or ck is not None:
            out = mask_bias(
                full,
                range(spec.L) if rk is None else rk,
                range(spec.L) if ck is None else ck,
            )
        with self._lock:
            if len(self._store) >= self.max_entries:
                self._store.clear()
            self._store.setdefault(full_key, full)
            self._store.setdefault(key, out)
        return out


default_cache = BiasCache()


def sinusoidal_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard transformer sinusoids: [sin(p w_i) | cos(p w_i)], w_i = 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError("1D sinusoid width must be even")
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sinusoidal_2d(spec: GridSpec, dim: int) -> np.ndarray:
    """(L, dim) table: first half encodes the patch row, second half the column."""
    if dim % 4:
        raise ValueError(f"2D sinusoid width must be divisible by 4, got {dim}")
    coords = spec.coord_array()
    return np.concatenate(
        [sinusoidal_1d(coords[:, 0], dim // 2), sinusoidal_1d(coords[:, 1], dim // 2)], axis=1
    )


def interpolate_table(table: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Bilinear resize of an (L_src, D) position table to dst's grid (half-pixel centers)."""
    grid = table.reshape(src.rows, src.cols, -1)

    def axis_weights(n_src: int, n_dst: int):
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    r0, r1, rw = axis_weights(src.rows, dst.rows)
    c0, c1, cw = axis_weights(src.cols, dst.cols)
    top = grid[r0][:, c0] * (1 - cw)[None, :, None] + grid[r0][:, c1] * cw[None, :, None]
    bot = grid[r1][:, c0] * (1 - cw)[None, :, None] + grid[r1][:, c1] * cw[None, :, None]
    out = top * (1 - rw)[:, None, None] + bot * rw[:, None, None]
    return out.reshape(dst.L, -1)


def format_grid(matrix: np.ndarray) -> str:
    """Human-readable one-decimal rendering, one matrix row per line."""
    return "\n".join(" ".join(f"{v:.1f}" for v in row) for row in np.asarray(matrix))
