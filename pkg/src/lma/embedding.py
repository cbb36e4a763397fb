"""Encoders ``f(x) -> R^d`` and the embedding matrices they produce.

The same :class:`EncoderSpec` type serves as the conditioning/kNN
extractor and as the trainable backbone of the SSL trainers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data.records import ImageRecord

ARCHITECTURES = ("tiny-conv", "resnet18", "resnet18-cifar", "oracle-linear")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class EncoderError(Exception):
    pass


class TinyConv(nn.Module):
    """Three conv blocks and global average pooling; output has ``out_dim`` channels."""

    def __init__(self, out_dim: int = 128, width: int = 32):
        super().__init__()

        def block(cin, cout, pool):
            layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            if pool:
                layers.append(nn.MaxPool2d(2))
            return layers

        self.features = nn.Sequential(
            *block(3, width, True),
            *block(width, 2 * width, True),
            *block(2 * width, out_dim, False),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.features((x - PIXEL_MEAN) / PIXEL_STD)


class OracleLinear(nn.Module):
    """Fixed random projection of the flattened ``HxWx3`` pixels (no training)."""

    def __init__(self, out_dim: int, resolution: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n_in = resolution * resolution * 3
        weight = torch.randn(out_dim, n_in, generator=g, dtype=torch.float64) / np.sqrt(n_in)
        self.register_buffer("weight", weight.float())

    def forward(self, x):
        # x is B x 3 x H x W; flatten in H, W, C order to match the pixel arrays
        flat = x.permute(0, 2, 3, 1).reshape(x.shape[0], -1)
        return flat @ self.weight.T


def _resnet18(cifar: bool) -> nn.Module:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if cifar:
        net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
    net.fc = nn.Identity()

    class _Wrapped(nn.Module):
        def __init__(self):
            super().__init__()
            self.net = net

        def forward(self, x):
            return self.net((x - PIXEL_MEAN) / PIXEL_STD)

    return _Wrapped()


@dataclass
class EncoderSpec:
    architecture: str
    output_dim: int
    parameters: nn.Module = field(repr=False)
    normalize_output: bool = True
    input_resolution: int | None = None
    options: dict = field(default_factory=dict)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable forward pass on a ``B x 3 x H x W`` tensor."""
        if self.input_resolution is not None and tuple(x.shape[-2:]) != (self.input_resolution,) * 2:
            raise EncoderError(f"encoder expects {self.input_resolution}px inputs, got {tuple(x.shape[-2:])}")
        return self.parameters(x)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.parameters.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @property
    def encoder_id(self) -> str:
        return f"{self.architecture}-d{self.output_dim}-{self.param_hash()[:12]}"


def build_encoder(architecture: str = "tiny-conv", output_dim: int = 128, input_resolution: int | None = 32,
                  normalize_output: bool = True, seed: int = 0, width: int = 32) -> EncoderSpec:
    if architecture not in ARCHITECTURES:
        raise EncoderError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")
    torch.manual_seed(seed)
    options = {"seed": seed}
    if architecture == "tiny-conv":
        module = TinyConv(output_dim, width)
        options["width"] = width
    elif architecture == "oracle-linear":
        if input_resolution is None:
            raise EncoderError("oracle-linear needs an input resolution")
        module = OracleLinear(output_dim, input_resolution, seed)
    else:
        if output_dim != 512:
            raise EncoderError(f"{architecture} produces 512-d features, not {output_dim}")
        module = _resnet18(cifar=architecture == "resnet18-cifar")
    return EncoderSpec(architecture, output_dim, module, normalize_output, input_resolution, options)


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    ids: list[int]
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("embedding values must be an N x d matrix")
        if len(self.ids) != len(self.values):
            raise ValueError(f"{len(self.ids)} ids for {len(self.values)} rows")
        if self.normalized:
            norms = np.linalg.norm(self.values, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise ValueError("rows flagged normalized but norms deviate from 1")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row_of(self, record_id: int) -> int:
        if not hasattr(self, "_pos"):
            self._pos = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return self._pos[int(record_id)]
        except KeyError:
            raise KeyError(f"id {record_id} not in embedding matrix") from None

    def l2_normalized(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix(l2_normalize(self.values), list(self.ids), normalized=True)

    def subset(self, ids: Sequence[int]) -> "EmbeddingMatrix":
        rows = [self.row_of(i) for i in ids]
        return EmbeddingMatrix(self.values[rows], [int(i) for i in ids], self.normalized)


def l2_normalize(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    return values / np.maximum(norms, eps)


def to_tensor(images) -> torch.Tensor:
    """``B x H x W x 3`` array (or list of records/arrays) -> ``B x 3 x H x W`` float tensor."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([im.pixels if isinstance(im, ImageRecord) else im for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)


@torch.no_grad()
def embed_array(encoder: EncoderSpec, pixels: np.ndarray, batch_size: int = 512,
                normalize: bool | None = None) -> np.ndarray:
    normalize = encoder.normalize_output if normalize is None else normalize
    module = encoder.parameters
    was_training = module.training
    module.eval()
    try:
        out = [encoder(to_tensor(pixels[i:i + batch_size])).double().numpy()
               for i in range(0, len(pixels), batch_size)]
    finally:
        module.train(was_training)
    values = np.concatenate(out) if out else np.zeros((0, encoder.output_dim))
    if values.shape[1] != encoder.output_dim:
        raise EncoderError(f"encoder produced {values.shape[1]}-d features, declared {encoder.output_dim}")
    return l2_normalize(values) if normalize else values


def embed_batch(encoder: EncoderSpec, images: Sequence[ImageRecord], batch_size: int = 512,
                normalize: bool | None = None) -> EmbeddingMatrix:
    """Embed records in evaluation mode; row ``i`` belongs to ``images[i]``."""
    if len(images) == 0:
        raise EncoderError("embed_batch needs at least one image")
    res = {im.resolution for im in images}
    if encoder.input_resolution is not None and res != {encoder.input_resolution}:
        raise EncoderError(f"resolution mismatch: encoder expects {encoder.input_resolution}, got {sorted(res)}")
    values = embed_array(encoder, np.stack([im.pixels for im in images]), batch_size, normalize)
    normalized = encoder.normalize_output if normalize is None else normalize
    return EmbeddingMatrix(values, [im.id for im in images], normalized=normalized)


def embed_dataset(encoder: EncoderSpec, handle, split: str, normalize: bool | None = None) -> EmbeddingMatrix:
    ids = handle.ids(split)
    values = embed_array(encoder, handle.pixels(ids), normalize=normalize)
    normalized = encoder.normalize_output if normalize is None else normalize
    return EmbeddingMatrix(values, [int(i) for i in ids], normalized=normalized)


def save_encoder_checkpoint(encoder: EncoderSpec, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "lma-encoder/1",
        "architecture": encoder.architecture,
        "output_dim": encoder.output_dim,
        "input_resolution": encoder.input_resolution,
        "normalize_output": encoder.normalize_output,
        "options": encoder.options,
        "state_dict": encoder.parameters.state_dict(),
        "meta": meta or {},
    }, path)
    return path


def load_encoder_checkpoint(path: str | Path, output_dim: int | None = None) -> EncoderSpec:
    """Rebuild an encoder from a checkpoint; weights are restored bit-exactly.

    ``output_dim``, if given, must agree with the checkpoint's declaration.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise EncoderError(f"corrupt encoder checkpoint {path}: {exc}") from None
    missing = {"architecture", "output_dim", "input_resolution", "normalize_output", "state_dict"} - set(blob)
    if missing:
        raise EncoderError(f"corrupt encoder checkpoint {path}: missing {sorted(missing)}")
    if blob["architecture"] not in ARCHITECTURES:
        raise EncoderError(f"checkpoint declares unknown architecture {blob['architecture']!r}")
    if output_dim is not None and output_dim != blob["output_dim"]:
        raise EncoderError(f"checkpoint declares output_dim {blob['output_dim']}, expected {output_dim}")
    opts = blob.get("options", {})
    enc = build_encoder(blob["architecture"], blob["output_dim"], blob["input_resolution"],
                        blob["normalize_output"], seed=opts.get("seed", 0), width=opts.get("width", 32))
    try:
        enc.parameters.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise EncoderError(f"architecture mismatch loading {path}: {exc}") from None
    enc.options = opts
    return enc

