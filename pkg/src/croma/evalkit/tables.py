"""Frozen representation tables exchanged between embedding export and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics import load_crma, save_crma

TABLE_FORMAT = "croma-embeddings/1"
SOURCES = ("R", "O", "RO", "concat")


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,) class ids, or (n, C) multi-hot
    split: str = "train"
    source: str = "O"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {self.matrix.shape}")
        if self.labels.ndim not in (1, 2) or self.labels.shape[0] != self.matrix.shape[0]:
            raise ValueError("label count does not match the number of rows")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding matrix contains NaN or Inf")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")
        if self.source not in SOURCES and self.source != "patch":
            raise ValueError(f"unknown source {self.source!r}")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    def subset(self, rows, split: str | None = None) -> "EmbeddingTable":
        rows = np.asarray(rows)
        return EmbeddingTable(self.matrix[rows], self.labels[rows], split or self.split, self.source)

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_crma(out / "embeddings.crma", self.matrix)
        meta = {"format": TABLE_FORMAT, "labels": self.labels.tolist(), "split": self.split, "source": self.source}
        (out / "table.json").write_text(json.dumps(meta))
        return out

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingTable":
        src = Path(path)
        meta = json.loads((src / "table.json").read_text())
        if meta.get("format") != TABLE_FORMAT:
            raise ValueError(f"{src} is not an embedding table")
        return cls(load_crma(src / "embeddings.crma"), np.asarray(meta["labels"]), meta["split"], meta["source"])
