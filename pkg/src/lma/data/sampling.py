"""Deterministic minibatch sampling."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..rng import RngStream
from .records import DatasetError, DatasetHandle, ImageRecord


def epoch_permutation(handle: DatasetHandle, split: str, seed: int, epoch: int) -> np.ndarray:
    """Shuffled ids of ``split``; a pure function of ``(seed, epoch)``."""
    ids = handle.ids(split)
    return ids[RngStream(f"shuffle/{split}/epoch{epoch}", seed).permutation(len(ids))]


def iterate_epoch(handle: DatasetHandle, split: str, batch_size: int, seed: int, epoch: int,
                  drop_last: bool = False) -> Iterator[np.ndarray]:
    """Yield id batches covering every record of ``split`` exactly once."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    perm = epoch_permutation(handle, split, seed, epoch)
    stop = len(perm) - len(perm) % batch_size if drop_last else len(perm)
    for start in range(0, stop, batch_size):
        yield perm[start:start + batch_size]


def sample_minibatch(handle: DatasetHandle, split: str, B: int, rng: RngStream) -> list[ImageRecord]:
    """Draw ``B`` distinct records of ``split``."""
    ids = handle.ids(split)
    if B > len(ids):
        raise DatasetError(f"batch size {B} exceeds split {split!r} size {len(ids)}")
    chosen = rng.choice(ids, size=B, replace=False)
    return [handle.record(i) for i in chosen]
