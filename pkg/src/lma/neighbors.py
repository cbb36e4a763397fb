"""Exact k-nearest-neighbour retrieval over embedding rows (Euclidean)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingMatrix
from .rng import RngStream


class NeighborIndexError(ValueError):
    """k out of range or unknown query id."""


@dataclass
class NeighborIndex:
    embeddings: EmbeddingMatrix
    k: int
    include_self: bool = True
    metric: str = "euclidean"
    block_size: int = 256

    def __post_init__(self):
        n = len(self.embeddings)
        limit = n if self.include_self else n - 1
        if not 1 <= self.k <= limit:
            raise NeighborIndexError(f"k={self.k} out of range [1, {limit}] for N={n}, include_self={self.include_self}")
        self._values = np.asarray(self.embeddings.values, dtype=np.float64)
        self._ids = np.asarray(self.embeddings.ids, dtype=np.int64)
        self._knn_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._ids)

    def distances_to(self, vectors: np.ndarray) -> np.ndarray:
        """``(q, N)`` Euclidean distances from query vectors to every indexed row."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self._values.shape[1]:
            raise NeighborIndexError(f"query dim {vectors.shape[1]} != index dim {self._values.shape[1]}")
        out = np.empty((len(vectors), len(self._values)))
        # direct differences (no Gram-matrix shortcut) keep distances exactly symmetric
        step = max(1, self.block_size * 64 // max(1, self._values.shape[1]))
        for lo in range(0, len(vectors), step):
            diff = vectors[lo:lo + step, None, :] - self._values[None, :, :]
            out[lo:lo + step] = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
        return out

    def _row(self, record_id: int) -> int:
        try:
            return self.embeddings.row_of(record_id)
        except KeyError:
            raise NeighborIndexError(f"unknown id {record_id}") from None

    def query(self, query, k: int | None = None) -> list[tuple[int, float]]:
        """Nearest ``k`` as ``(id, distance)``; ascending distance, ties by id."""
        k = self.k if k is None else k
        exclude = None
        if isinstance(query, (int, np.integer)):
            row = self._row(int(query))
            vec = self._values[row]
            if not self.include_self:
                exclude = row
        else:
            vec = np.asarray(query, dtype=np.float64)
        limit = len(self) - (exclude is not None)
        if not 1 <= k <= limit:
            raise NeighborIndexError(f"k={k} out of range [1, {limit}]")
        d = self.distances_to(vec)[0]
        order = np.lexsort((self._ids, d))
        if exclude is not None:
            order = order[order != exclude]
        order = order[:k]
        return [(int(self._ids[j]), float(d[j])) for j in order]

    def neighbor_ids(self, record_id: int) -> np.ndarray:
        """Cached ``kNN(x_i)`` id set for an indexed record."""
        record_id = int(record_id)
        if record_id not in self._knn_cache:
            self._knn_cache[record_id] = np.array([i for i, _ in self.query(record_id, self.k)], dtype=np.int64)
        return self._knn_cache[record_id]

    def precompute(self) -> None:
        """Fill the neighbour cache for every indexed id in blocked passes."""
        n = len(self)
        for lo in range(0, n, self.block_size):
            rows = np.arange(lo, min(n, lo + self.block_size))
            d = self.distances_to(self._values[rows])
            for r, drow in zip(rows, d):
                order = np.lexsort((self._ids, drow))
                if not self.include_self:
                    order = order[order != r]
                self._knn_cache[int(self._ids[r])] = self._ids[order[:self.k]].copy()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "embeddings.npz", values=self.embeddings.values, ids=np.asarray(self.embeddings.ids))
        (directory / "index.json").write_text(json.dumps({
            "k": self.k, "metric": self.metric, "include_self": self.include_self,
            "normalized": self.embeddings.normalized,
        }))

    @classmethod
    def load(cls, directory: str | Path) -> "NeighborIndex":
        directory = Path(directory)
        meta = json.loads((directory / "index.json").read_text())
        arr = np.load(directory / "embeddings.npz")
        emb = EmbeddingMatrix(arr["values"], [int(i) for i in arr["ids"]], meta["normalized"])
        return cls(emb, meta["k"], meta["include_self"], meta["metric"])


def build_index(embeddings: EmbeddingMatrix, k: int, include_self: bool = True) -> NeighborIndex:
    return NeighborIndex(embeddings, k, include_self)


def query_knn(index: NeighborIndex, query, k: int | None = None) -> list[tuple[int, float]]:
    return index.query(query, k)


def sample_knn_view(index: NeighborIndex, x_i: int, rng: RngStream) -> int:
    """Uniform draw from ``kNN(x_i)``."""
    neighbors = index.neighbor_ids(x_i)
    return int(neighbors[rng.integers(0, len(neighbors))])
