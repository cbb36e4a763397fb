"""Image records and dataset handles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

SPLITS = ("train", "val", "test", "unlabeled")


class DatasetError(Exception):
    """Raised for unknown datasets, missing files or malformed records."""


def check_pixels(pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DatasetError(f"expected an HxWx3 image, got shape {pixels.shape}")
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise DatasetError("image has an empty spatial dimension")
    lo, hi = float(pixels.min()), float(pixels.max())
    if lo < 0.0 or hi > 1.0:
        raise DatasetError(f"pixel values outside [0, 1]: min={lo}, max={hi}")


@dataclass
class ImageRecord:
    id: int
    pixels: np.ndarray
    label: int | None = None
    orbit_id: int | None = None
    split: str = "train"
    # generator-born records carry the latent (and condition) they came from
    latent: np.ndarray | None = None
    factors: dict | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}")
        check_pixels(self.pixels)

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class SplitStore:
    """Contiguous block of records sharing one split tag.

    ``pixels`` is either an ``(N, H, W, 3)`` array (uint8 or float in
    [0, 1]) or a callable ``index -> HxWx3 float array`` for lazily loaded
    image folders.
    """

    start: int
    count: int
    pixels: np.ndarray | Callable[[int], np.ndarray]
    labels: np.ndarray | None = None
    orbit_ids: np.ndarray | None = None
    latents: np.ndarray | None = None
    factors: list[dict] | None = None

    def image(self, index: int) -> np.ndarray:
        if callable(self.pixels):
            return self.pixels(index)
        img = self.pixels[index]
        if img.dtype == np.uint8:
            return img.astype(np.float32) / 255.0
        return np.asarray(img, dtype=np.float32)

    def images(self, indices: np.ndarray) -> np.ndarray:
        if callable(self.pixels):
            return np.stack([self.pixels(int(i)) for i in indices])
        batch = self.pixels[indices]
        if batch.dtype == np.uint8:
            return batch.astype(np.float32) / 255.0
        return np.asarray(batch, dtype=np.float32)


@dataclass
class DatasetHandle:
    """Immutable view over a loaded dataset.

    Record ids are global: each split owns a contiguous id range, assigned
    in the order the splits were registered.
    """

    name: str
    resolution: int
    num_classes: int
    stores: dict[str, SplitStore] = field(default_factory=dict, repr=False)
    # synthetic datasets keep their generative description here
    synthetic: object | None = field(default=None, repr=False)
    class_names: list[str] | None = field(default=None, repr=False)

    @property
    def splits(self) -> dict[str, int]:
        return {tag: store.count for tag, store in self.stores.items()}

    def __len__(self) -> int:
        return sum(s.count for s in self.stores.values())

    def ids(self, split: str) -> np.ndarray:
        store = self._store(split)
        return np.arange(store.start, store.start + store.count)

    def _store(self, split: str) -> SplitStore:
        try:
            return self.stores[split]
        except KeyError:
            raise DatasetError(f"{self.name} has no split {split!r}; available: {sorted(self.stores)}") from None

    def _locate(self, record_id: int) -> tuple[str, SplitStore, int]:
        for tag, store in self.stores.items():
            if store.start <= record_id < store.start + store.count:
                return tag, store, record_id - store.start
        raise DatasetError(f"record id {record_id} not in {self.name}")

    def split_of(self, record_id: int) -> str:
        return self._locate(int(record_id))[0]

    def record(self, record_id: int) -> ImageRecord:
        record_id = int(record_id)
        tag, store, idx = self._locate(record_id)
        return ImageRecord(
            id=record_id,
            pixels=store.image(idx),
            label=None if store.labels is None else int(store.labels[idx]),
            orbit_id=None if store.orbit_ids is None else int(store.orbit_ids[idx]),
            split=tag,
            latent=None if store.latents is None else store.latents[idx],
            factors=None if store.factors is None else store.factors[idx],
        )

    def records(self, split: str) -> Iterator[ImageRecord]:
        for rid in self.ids(split):
            yield self.record(rid)

    def pixels(self, ids: Sequence[int]) -> np.ndarray:
        """Stack pixels for ids that all belong to one split."""
        ids = np.asarray(ids, dtype=np.int64)
        tag, store, _ = self._locate(int(ids[0]))
        local = ids - store.start
        if local.min() < 0 or local.max() >= store.count:
            raise DatasetError("pixels() ids must come from a single split")
        return store.images(local)

    def labels(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        tag, store, _ = self._locate(int(ids[0]))
        if store.labels is None:
            raise DatasetError(f"split {tag!r} of {self.name} is unlabeled")
        return store.labels[ids - store.start]

    def orbit_ids(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        tag, store, _ = self._locate(int(ids[0]))
        if store.orbit_ids is None:
            raise DatasetError(f"{self.name} carries no orbit labels")
        return store.orbit_ids[ids - store.start]

    def is_labeled(self, split: str) -> bool:
        return split in self.stores and self.stores[split].labels is not None


def build_handle(name: str, resolution: int, num_classes: int,
                 parts: list[tuple[str, dict]], **extra) -> DatasetHandle:
    """Assemble a handle from ``(split, store_kwargs)`` pairs, assigning id ranges."""
    stores = {}
    start = 0
    for tag, kwargs in parts:
        if tag not in SPLITS:
            raise DatasetError(f"unknown split tag {tag!r}")
        store = SplitStore(start=start, **kwargs)
        stores[tag] = store
        start += store.count
    return DatasetHandle(name=name, resolution=resolution, num_classes=num_classes, stores=stores, **extra)
