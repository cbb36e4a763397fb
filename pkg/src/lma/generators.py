"""Local-manifold view samplers behind one backend interface.

Backends:

* ``knn`` - a uniformly drawn dataset neighbour of the record
* ``traversal`` - ``G(z_i + eps)`` around the latent a record was generated from
* ``instance-conditioned`` - ``G(z, f(x_i))`` with ``z`` from a latent prior
* ``oracle-manifold`` - renders a member of the record's ground-truth orbit
  of a synthetic dataset, optionally degraded to imitate an imperfect generator
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import ndtr
from torch import nn

from .data.records import DatasetHandle, ImageRecord, check_pixels
from .data.synthetic import LATENT_DIM, NUISANCE_DIM, SyntheticSpec, load_synthetic
from .embedding import EmbeddingMatrix, EncoderSpec, embed_batch
from .neighbors import NeighborIndex, sample_knn_view
from .rng import RngStream

BACKEND_KINDS = ("knn", "traversal", "instance-conditioned", "oracle-manifold")


class GeneratorError(Exception):
    pass


# ---------------------------------------------------------------- priors

@dataclass
class LatentPrior:
    kind: str = "standard-normal"
    dim: int = LATENT_DIM
    presampled: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("standard-normal", "finite-set"):
            raise GeneratorError(f"unknown prior kind {self.kind!r}")
        if self.kind == "finite-set":
            if self.presampled is None or len(self.presampled) < 1:
                raise GeneratorError("finite-set prior needs at least one pre-sampled row")
            if self.presampled.shape[1] != self.dim:
                raise GeneratorError("pre-sampled rows do not match prior dim")

    @property
    def size(self) -> float:
        return float("inf") if self.kind == "standard-normal" else len(self.presampled)

    def sample_index(self, rng: RngStream) -> int:
        return int(rng.integers(0, len(self.presampled)))

    def sample(self, rng: RngStream) -> np.ndarray:
        if self.kind == "standard-normal":
            return rng.normal(size=self.dim)
        return self.presampled[self.sample_index(rng)]


def restrict_prior_to_finite(dim: int, n: int, rng: RngStream) -> LatentPrior:
    """Pre-sample ``n`` latents once; later draws are uniform over them."""
    if n < 1:
        raise GeneratorError(f"finite prior needs n >= 1, got {n}")
    return LatentPrior("finite-set", dim, rng.normal(size=(n, dim)))


def make_traversal_perturbation(dim: int, sigma: float, rng: RngStream) -> np.ndarray:
    """``eps ~ N(0, sigma^2 I)``."""
    if sigma < 0:
        raise GeneratorError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros(dim)
    return rng.normal(0.0, sigma, size=dim)


@dataclass
class ConditionBank:
    """Cache of conditioning embeddings keyed by record id."""

    embeddings: EmbeddingMatrix

    def __contains__(self, record_id) -> bool:
        try:
            self.embeddings.row_of(record_id)
            return True
        except KeyError:
            return False

    def lookup(self, record_id: int) -> np.ndarray:
        return self.embeddings.values[self.embeddings.row_of(record_id)]


# ---------------------------------------------------------------- backends

class GeneratorBackend:
    kind: str = ""
    latent_dim: int = 0
    condition_dim: int = 0
    resolution: int = 0

    def generate(self, latent, condition) -> np.ndarray:
        raise NotImplementedError


class MLPGenerator(nn.Module):
    """Small fully connected generator ``(z, h) -> image`` with sigmoid output."""

    def __init__(self, latent_dim: int, condition_dim: int, resolution: int, hidden: int = 256):
        super().__init__()
        self.resolution = resolution
        self.net = nn.Sequential(
            nn.Linear(latent_dim + condition_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, resolution * resolution * 3),
        )

    def forward(self, z, h=None):
        x = z if h is None else torch.cat([z, h], dim=1)
        return torch.sigmoid(self.net(x)).view(-1, self.resolution, self.resolution, 3)


class NeuralBackend(GeneratorBackend):
    """Wraps an :class:`MLPGenerator`; conditional when ``condition_dim > 0``."""

    def __init__(self, module: MLPGenerator, latent_dim: int, condition_dim: int, resolution: int,
                 kind: str = "instance-conditioned", hidden: int = 256):
        self.module = module.eval()
        self.kind = kind
        self.latent_dim = latent_dim
        self.condition_dim = condition_dim
        self.resolution = resolution
        self.hidden = hidden

    @torch.no_grad()
    def generate(self, latent, condition=None) -> np.ndarray:
        z = torch.as_tensor(np.asarray(latent, dtype=np.float32)).view(1, -1)
        if z.shape[1] != self.latent_dim:
            raise GeneratorError(f"latent dim {z.shape[1]} != generator latent dim {self.latent_dim}")
        h = None
        if self.condition_dim:
            if condition is None:
                raise GeneratorError("conditional generator needs a condition vector")
            h = torch.as_tensor(np.asarray(condition, dtype=np.float32)).view(1, -1)
            if h.shape[1] != self.condition_dim:
                raise GeneratorError(f"condition dim {h.shape[1]} != generator condition dim {self.condition_dim}")
        return self.module(z, h)[0].numpy().astype(np.float32)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": "lma-generator/1", "architecture": "mlp", "latent_dim": self.latent_dim,
            "condition_dim": self.condition_dim, "resolution": self.resolution, "hidden": self.hidden,
            "state_dict": self.module.state_dict(),
        }, path)
        return path


def build_mlp_backend(latent_dim: int, condition_dim: int, resolution: int, seed: int = 0,
                      kind: str = "instance-conditioned", hidden: int = 256) -> NeuralBackend:
    torch.manual_seed(seed)
    return NeuralBackend(MLPGenerator(latent_dim, condition_dim, resolution, hidden),
                         latent_dim, condition_dim, resolution, kind, hidden)


class OracleManifoldBackend(GeneratorBackend):
    """Ground-truth orbit renderer for synthetic datasets.

    The condition is a concept (orbit) id.  With default fidelity settings
    ``G(z, c)`` for ``z ~ N(0, I)`` is exactly the orbit's view
    distribution.  The fidelity knobs imitate a flawed generator:

    * ``coverage`` < 1 shrinks the reachable factor ranges (mode collapse)
    * ``corruption_rate`` renders a different concept for that fraction of latents
    * ``artifact_strength`` adds latent-dependent smooth colour artifacts
    """

    kind = "oracle-manifold"

    def __init__(self, spec: SyntheticSpec, coverage: float = 1.0, corruption_rate: float = 0.0,
                 artifact_strength: float = 0.0):
        if not 0.0 < coverage <= 1.0:
            raise GeneratorError("coverage must lie in (0, 1]")
        if not 0.0 <= corruption_rate <= 1.0:
            raise GeneratorError("corruption_rate must lie in [0, 1]")
        self.spec = spec
        self.coverage = coverage
        self.corruption_rate = corruption_rate
        self.artifact_strength = artifact_strength
        self.latent_dim = LATENT_DIM
        self.condition_dim = 0
        self.resolution = spec.resolution
        self.n_concepts = len(spec.concepts)
        self._artifacts = self._artifact_basis() if artifact_strength else None

    def _artifact_basis(self) -> np.ndarray:
        n_basis = LATENT_DIM - NUISANCE_DIM - 1
        g = RngStream("oracle-artifacts", self.spec.seed)
        res = self.resolution
        yy, xx = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
        basis = []
        for _ in range(n_basis):
            fx, fy = g.uniform(0.5, 2.0, size=2)
            px, py = g.uniform(0, 2 * np.pi, size=2)
            field_ = np.sin(2 * np.pi * fx * xx + px) * np.cos(2 * np.pi * fy * yy + py)
            color = g.normal(size=3)
            basis.append(field_[..., None] * (color / np.linalg.norm(color)))
        return np.stack(basis).astype(np.float32)

    def concept_for(self, latent, condition: int) -> int:
        if self.corruption_rate and self.n_concepts > 1:
            u = float(ndtr(latent[NUISANCE_DIM]))
            if u < self.corruption_rate:
                offset = 1 + int(u / self.corruption_rate * (self.n_concepts - 1))
                return (int(condition) + min(offset, self.n_concepts - 1)) % self.n_concepts
        return int(condition)

    def generate(self, latent, condition) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != (LATENT_DIM,):
            raise GeneratorError(f"oracle latent must have shape ({LATENT_DIM},), got {latent.shape}")
        if condition is None or not 0 <= int(condition) < self.n_concepts:
            raise GeneratorError(f"oracle condition must be an orbit id in [0, {self.n_concepts})")
        img = self.spec.render(self.concept_for(latent, condition), latent, self.coverage)
        if self._artifacts is not None:
            w = np.tanh(latent[NUISANCE_DIM + 1:]).astype(np.float32)
            img = np.clip(img + self.artifact_strength * np.tensordot(w, self._artifacts, axes=1), 0.0, 1.0)
        return img.astype(np.float32)


class KnnBackend(GeneratorBackend):
    kind = "knn"

    def __init__(self, index: NeighborIndex, dataset: DatasetHandle):
        self.index = index
        self.dataset = dataset
        self.resolution = dataset.resolution

    def generate(self, latent, condition) -> np.ndarray:
        # the "condition" of a kNN backend is the chosen neighbour id
        return self.dataset.record(int(condition)).pixels


class TraversalBackend(GeneratorBackend):
    """Perturbs the stored latent of generator-born records."""

    kind = "traversal"

    def __init__(self, base: GeneratorBackend, sigma: float = 0.2):
        if sigma < 0:
            raise GeneratorError("sigma must be non-negative")
        self.base = base
        self.sigma = sigma
        self.latent_dim = base.latent_dim
        self.condition_dim = base.condition_dim
        self.resolution = base.resolution

    def generate(self, latent, condition=None) -> np.ndarray:
        return self.base.generate(latent, condition)


def load_generator_checkpoint(path: str | Path, kind: str, **options) -> GeneratorBackend:
    """Load a backend.

    ``instance-conditioned`` and ``traversal`` read an MLP generator
    checkpoint; ``oracle-manifold`` reads a synthetic dataset directory
    (its manifest).  ``options`` go to the backend constructor.
    """
    path = Path(path)
    if kind not in BACKEND_KINDS or kind == "knn":
        raise GeneratorError(f"cannot load a {kind!r} backend from a checkpoint")
    if kind == "oracle-manifold":
        handle = load_synthetic(path)
        return OracleManifoldBackend(handle.synthetic, **options)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        dims = int(blob["latent_dim"]), int(blob["condition_dim"]), int(blob["resolution"])
        state = blob["state_dict"]
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise GeneratorError(f"corrupt generator checkpoint {path}: {exc}") from None
    if blob.get("architecture") != "mlp":
        raise GeneratorError(f"unsupported generator architecture {blob.get('architecture')!r}")
    hidden = int(blob.get("hidden", 256))
    module = MLPGenerator(*dims, hidden=hidden)
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise GeneratorError(f"corrupt generator checkpoint {path}: {exc}") from None
    if kind == "instance-conditioned" and dims[1] == 0:
        raise GeneratorError("instance-conditioned backend needs a conditional generator")
    backend = NeuralBackend(module, *dims, kind="instance-conditioned" if dims[1] else "unconditional",
                            hidden=hidden)
    if kind == "traversal":
        return TraversalBackend(backend, **options)
    return backend


# ---------------------------------------------------------------- sampling

def condition_for(record: ImageRecord, embedder: EncoderSpec | None, bank: ConditionBank | None = None) -> np.ndarray:
    """``f(x_i)``: cached in ``bank`` if present, otherwise computed on the fly."""
    if bank is not None and record.id in bank:
        return bank.lookup(record.id)
    if embedder is None:
        raise GeneratorError("instance-conditioned sampling needs an embedder or a condition bank entry")
    return embed_batch(embedder, [record]).values[0]


def sample_view(backend: GeneratorBackend, x_i: ImageRecord, prior: LatentPrior | None = None,
                embedder: EncoderSpec | None = None, rng: RngStream | None = None,
                bank: ConditionBank | None = None) -> np.ndarray:
    """Draw one local-manifold view of ``x_i`` from ``backend``."""
    if rng is None:
        raise GeneratorError("sample_view needs an explicit rng")
    if backend.resolution != x_i.resolution:
        raise GeneratorError(f"backend resolution {backend.resolution} != record resolution {x_i.resolution}")
    if backend.kind == "knn":
        return backend.generate(None, sample_knn_view(backend.index, x_i.id, rng))
    if backend.kind == "traversal":
        if x_i.latent is None:
            raise GeneratorError(f"record {x_i.id} has no stored latent; traversal applies to generated data only")
        eps = make_traversal_perturbation(backend.latent_dim, backend.sigma, rng)
        cond = x_i.orbit_id if isinstance(backend.base, OracleManifoldBackend) else None
        out = backend.generate(np.asarray(x_i.latent) + eps, cond)
    else:
        if prior is None:
            raise GeneratorError(f"{backend.kind} sampling needs a latent prior")
        if prior.dim != backend.latent_dim:
            raise GeneratorError(f"prior dim {prior.dim} != backend latent dim {backend.latent_dim}")
        z = prior.sample(rng)
        if backend.kind == "oracle-manifold":
            if x_i.orbit_id is None:
                raise GeneratorError("oracle-manifold sampling needs a record with an orbit id")
            out = backend.generate(z, x_i.orbit_id)
        else:
            h = condition_for(x_i, embedder, bank)
            if len(h) != backend.condition_dim:
                raise GeneratorError(f"condition dim {len(h)} != backend condition dim {backend.condition_dim}")
            out = backend.generate(z, h)
    check_pixels(out)
    return out
