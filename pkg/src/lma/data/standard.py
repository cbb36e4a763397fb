"""Loaders for the standard on-disk layouts of the benchmark datasets.

Supported layouts (relative to ``root``):

* ``cifar10``: ``cifar-10-batches-py/data_batch_{1..5}``, ``test_batch``
* ``cifar100``: ``cifar-100-python/train``, ``test``
* ``stl10``: ``stl10_binary/{train,test}_{X,y}.bin``, ``unlabeled_X.bin``
* ``imagenet100``: ``imagenet100/{train,val}/<class>/<image>`` folders
"""

from __future__ import annotations

import pickle
from pathlib import Path
from typing import Sequence

import numpy as np

from .records import DatasetError, DatasetHandle, build_handle

EXPECTED_SPLITS = {
    "cifar10": {"train": 50_000, "val": 10_000},
    "cifar100": {"train": 50_000, "val": 10_000},
    "stl10": {"train": 5_000, "unlabeled": 100_000, "test": 8_000},
    "imagenet100": {"train": 126_689, "val": 5_000},
}
RESOLUTION = {"cifar10": 32, "cifar100": 32, "stl10": 96, "imagenet100": 96}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "stl10": 10, "imagenet100": 100}
IMAGE_SUFFIXES = {".jpeg", ".jpg", ".png"}


def _unpickle(path: Path, split: str) -> dict:
    if not path.exists():
        raise DatasetError(f"missing file for split {split!r}: {path}")
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except (pickle.UnpicklingError, EOFError, ValueError) as exc:
        raise DatasetError(f"corrupt file for split {split!r}: {path} ({exc})") from None


def _cifar_images(raw: np.ndarray) -> np.ndarray:
    return raw.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()


def _load_cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    xs, ys = [], []
    for i in range(1, 6):
        blob = _unpickle(base / f"data_batch_{i}", "train")
        xs.append(_cifar_images(np.asarray(blob[b"data"], dtype=np.uint8)))
        ys.append(np.asarray(blob[b"labels"]))
    test = _unpickle(base / "test_batch", "val")
    return [
        ("train", dict(count=sum(len(y) for y in ys), pixels=np.concatenate(xs), labels=np.concatenate(ys))),
        ("val", dict(count=len(test[b"labels"]), pixels=_cifar_images(np.asarray(test[b"data"], dtype=np.uint8)),
                     labels=np.asarray(test[b"labels"]))),
    ]


def _load_cifar100(root: Path):
    base = root / "cifar-100-python"
    parts = []
    for tag, fname in (("train", "train"), ("val", "test")):
        blob = _unpickle(base / fname, tag)
        labels = np.asarray(blob[b"fine_labels"])
        parts.append((tag, dict(count=len(labels), pixels=_cifar_images(np.asarray(blob[b"data"], dtype=np.uint8)),
                                labels=labels)))
    return parts


def _stl_images(path: Path, split: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file for split {split!r}: {path}")
    size = path.stat().st_size
    if size % (3 * 96 * 96):
        raise DatasetError(f"corrupt file for split {split!r}: {path} has {size} bytes")
    raw = np.memmap(path, dtype=np.uint8, mode="r").reshape(-1, 3, 96, 96)
    # stored column-major per channel
    return raw.transpose(0, 3, 2, 1)


def _stl_labels(path: Path, split: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file for split {split!r}: {path}")
    return np.fromfile(path, dtype=np.uint8).astype(np.int64) - 1


def _load_stl10(root: Path):
    base = root / "stl10_binary"
    parts = []
    for tag in ("train", "unlabeled", "test"):
        x = _stl_images(base / f"{tag}_X.bin", tag)
        store = dict(count=len(x), pixels=x)
        if tag != "unlabeled":
            y = _stl_labels(base / f"{tag}_y.bin", tag)
            if len(y) != len(x):
                raise DatasetError(f"corrupt split {tag!r}: {len(x)} images but {len(y)} labels")
            store["labels"] = y
        parts.append((tag, store))
    return parts


def _folder_loader(files: list[Path], resolution: int):
    from PIL import Image

    def load(index: int) -> np.ndarray:
        with Image.open(files[index]) as im:
            im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0

    return load


def _load_imagenet100(root: Path, class_list: Sequence[str] | None, resolution: int):
    base = root / "imagenet100"
    parts = []
    classes = list(class_list) if class_list else None
    for tag in ("train", "val"):
        split_dir = base / tag
        if not split_dir.is_dir():
            raise DatasetError(f"missing directory for split {tag!r}: {split_dir}")
        if classes is None:
            classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        files, labels = [], []
        for c, name in enumerate(classes):
            cdir = split_dir / name
            if not cdir.is_dir():
                raise DatasetError(f"missing class {name!r} in split {tag!r}")
            for f in sorted(cdir.iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    files.append(f)
                    labels.append(c)
        parts.append((tag, dict(count=len(files), pixels=_folder_loader(files, resolution), labels=np.array(labels))))
    return parts, classes


def load_dataset(name: str, root: str | Path, strict: bool = True,
                 class_list: Sequence[str] | None = None) -> DatasetHandle:
    """Load a named dataset from its standard layout under ``root``.

    With ``strict`` the split sizes must equal the published ones; pass
    ``strict=False`` for subsets or fixtures.  ``class_list`` selects the
    ImageNet100 classes (default: every class folder, sorted).
    """
    root = Path(root)
    name = name.lower()
    if name not in EXPECTED_SPLITS:
        raise DatasetError(f"unknown dataset {name!r}; supported: {sorted(EXPECTED_SPLITS)}")
    class_names = None
    if name == "cifar10":
        parts = _load_cifar10(root)
    elif name == "cifar100":
        parts = _load_cifar100(root)
    elif name == "stl10":
        parts = _load_stl10(root)
    else:
        parts, class_names = _load_imagenet100(root, class_list, RESOLUTION[name])
    handle = build_handle(name, RESOLUTION[name], NUM_CLASSES[name], parts, class_names=class_names)
    if strict:
        for tag, expected in EXPECTED_SPLITS[name].items():
            got = handle.splits.get(tag, 0)
            if got != expected:
                raise DatasetError(f"{name} split {tag!r} has {got} records, expected {expected}")
    return handle
