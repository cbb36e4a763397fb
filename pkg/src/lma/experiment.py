"""Experiment configuration, run artifacts, ablation sweeps and plots.

A run is identified by the sha256 of its canonical config (sorted-key JSON,
``output_dir`` excluded).  Run directories live under the artifact root and
are write-once: a run is assembled in a private temporary directory and
renamed into place only once every file is written, so a crashed cell
leaves nothing behind and a finished cell is never rewritten.  Re-running an
existing hash loads the stored artifact.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import types
import typing
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import MODES, HcaConfig, LmaPolicy
from .data import FACTORS, LATENT_DIM, DatasetHandle, load_dataset, load_synthetic, make_synthetic_manifold
from .data.standard import EXPECTED_SPLITS
from .embedding import (ARCHITECTURES, EmbeddingMatrix, EncoderSpec, build_encoder, embed_array, embed_dataset,
                        load_encoder_checkpoint, save_encoder_checkpoint)
from .evaluation import LinearProbeConfig, frechet_distance, invariance_report, train_linear_probe
from .generators import (BACKEND_KINDS, GeneratorBackend, KnnBackend, LatentPrior, OracleManifoldBackend,
                         TraversalBackend, load_generator_checkpoint, restrict_prior_to_finite, sample_view)
from .neighbors import build_index
from .rng import RngStream
from .ssl import METHODS, TrainConfig, pretrain

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARTIFACT_ENV = "LMA_ARTIFACT_ROOT"
DEFAULT_ARTIFACT_ROOT = "artifacts"
DATASETS = ("synthetic",) + tuple(EXPECTED_SPLITS)
PRIORS = ("standard-normal", "finite-set")
INFINITE = "inf"


class ConfigError(ValueError):
    """Every problem found in a config, reported together."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config: " + "; ".join(self.errors))


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------- config sections

@dataclass
class DatasetConfig:
    name: str = "synthetic"
    # standard datasets: directory of the on-disk layout; synthetic: optional saved directory
    root: str = ""
    n_concepts: int = 20
    views_per_concept: int = 200
    factors: list[str] = field(default_factory=lambda: ["rotation", "hue"])
    resolution: int = 32
    seed: int = 0
    holdout_fraction: float = 0.25
    concept_style: str = "polygon"
    # synthetic only: {factor: [lo, hi]} overriding the default factor ranges
    factor_ranges: dict[str, list[float]] = field(default_factory=dict)
    class_list: list[str] | None = None
    pretrain_split: str = "train"


@dataclass
class ModelConfig:
    architecture: str = "tiny-conv"
    output_dim: int = 128
    width: int = 16


@dataclass
class LmaConfig:
    alpha: float = 0.3
    mode: str = "lma"
    backend: str = "oracle-manifold"
    prior: str = "standard-normal"
    n_views: int | None = None
    mix_shared_base: bool = True
    generator_checkpoint: str = ""
    # oracle fidelity (1, 0, 0 is the exact orbit distribution)
    coverage: float = 1.0
    corruption_rate: float = 0.0
    artifact_strength: float = 0.0
    # knn backend
    k: int = 20
    include_self: bool = True
    traversal_sigma: float = 0.2
    # f_phi used for kNN, conditioning and FID features
    embedder: str = "oracle-linear"
    embedder_dim: int = 64
    embedder_checkpoint: str = ""
    normalize_embeddings: bool = True


@dataclass
class EvalConfig:
    invariance: bool = True
    invariance_views: int = 16
    fid_samples: int = 1000


def _dataclass_sections() -> dict[str, type]:
    return {"dataset": DatasetConfig, "model": ModelConfig, "lma": LmaConfig, "hca": HcaConfig,
            "train": TrainConfig, "probe": LinearProbeConfig, "evaluation": EvalConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lma: LmaConfig = field(default_factory=LmaConfig)
    hca: HcaConfig = field(default_factory=HcaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: LinearProbeConfig = field(default_factory=LinearProbeConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = ""
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version, "seeds": list(self.seeds), "output_dir": self.output_dir}
        for name in _dataclass_sections():
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentConfig":
        return parse_config(blob)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            blob = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from None
        return parse_config(blob)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    @property
    def hash(self) -> str:
        return config_hash(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"lma.alpha": 1.0})``; re-validated."""
        blob = self.to_dict()
        for key, value in changes.items():
            head, _, tail = key.partition(".")
            if tail:
                blob.setdefault(head, {})[tail] = value
            else:
                blob[head] = value
        return parse_config(blob)

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(seeds=[int(seed)], **{"train.seed": int(seed)})


def config_hash(cfg: ExperimentConfig) -> str:
    blob = cfg.to_dict()
    blob.pop("output_dir", None)
    canon = json.dumps(blob, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------- parsing and validation

def _type_name(hint) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value, hint, where: str, errors: list[str]):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where, errors)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif origin is dict:
        if isinstance(value, dict):
            key_t, val_t = args if args else (typing.Any, typing.Any)
            out = {}
            for k, v in value.items():
                out[_coerce(k, key_t, f"{where}.{k}", errors)] = _coerce(v, val_t, f"{where}.{k}", errors)
            return out
        errors.append(f"{where}: expected an object, got {type(value).__name__}")
        return None
    elif origin in (list, tuple):
        if isinstance(value, (list, tuple)):
            if origin is tuple and args and args[-1] is not Ellipsis:
                if len(value) != len(args):
                    errors.append(f"{where}: expected {len(args)} values, got {len(value)}")
                    return None
                items = [_coerce(v, a, where, errors) for v, a in zip(value, args)]
                return tuple(items)
            item = args[0] if args else typing.Any
            items = [v if item is typing.Any else _coerce(v, item, where, errors) for v in value]
            return tuple(items) if origin is tuple else items
        hint_name = f"list of {_type_name(args[0])}" if args else "list"
        errors.append(f"{where}: expected {hint_name}, got {type(value).__name__}")
        return None
    else:
        return value
    errors.append(f"{where}: expected {_type_name(hint)}, got {type(value).__name__} {value!r}")
    return None


def _parse_section(cls, blob, where: str, errors: list[str]) -> dict:
    if not isinstance(blob, dict):
        errors.append(f"{where}: expected an object, got {type(blob).__name__}")
        return {}
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(blob) - names):
        errors.append(f"{where}.{key}: unknown key")
    kwargs = {}
    for key in sorted(set(blob) & names):
        before = len(errors)
        value = _coerce(blob[key], hints[key], f"{where}.{key}", errors)
        if len(errors) == before:
            kwargs[key] = value
    return kwargs


def parse_config(blob: dict) -> ExperimentConfig:
    """Build and validate a config; all problems are collected into one :class:`ConfigError`."""
    errors: list[str] = []
    if not isinstance(blob, dict):
        raise ConfigError([f"config must be an object, got {type(blob).__name__}"])
    sections = _dataclass_sections()
    top = {"schema_version", "seeds", "output_dir", *sections}
    for key in sorted(set(blob) - top):
        errors.append(f"{key}: unknown key")
    version = blob.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})")
    seeds = _coerce(blob.get("seeds", [0]), list[int], "seeds", errors)
    if seeds is not None and not seeds:
        errors.append("seeds: at least one seed is required")
    output_dir = _coerce(blob.get("output_dir", ""), str, "output_dir", errors)
    built = {}
    for name, cls in sections.items():
        kwargs = _parse_section(cls, blob.get(name, {}), name, errors)
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            errors.append(f"{name}: {exc}")
            built[name] = cls()
    cfg = ExperimentConfig(**built, seeds=seeds or [0], output_dir=output_dir or "", schema_version=SCHEMA_VERSION)
    errors.extend(validate_config(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Semantic checks that go beyond field types."""
    errors = []
    d, m, l, t, p, e = cfg.dataset, cfg.model, cfg.lma, cfg.train, cfg.probe, cfg.evaluation
    if d.name not in DATASETS:
        errors.append(f"dataset.name: unknown dataset {d.name!r}; choose from {DATASETS}")
    if d.name != "synthetic" and not d.root:
        errors.append(f"dataset.root: required for {d.name!r}")
    bad = sorted(set(d.factors) - set(FACTORS))
    if bad:
        errors.append(f"dataset.factors: unsupported factor(s) {bad}; choose from {FACTORS}")
    if d.n_concepts < 1:
        errors.append("dataset.n_concepts: must be >= 1")
    if d.views_per_concept < 1:
        errors.append("dataset.views_per_concept: must be >= 1")
    if d.resolution < 1:
        errors.append("dataset.resolution: must be >= 1")
    if not 0.0 <= d.holdout_fraction < 1.0:
        errors.append("dataset.holdout_fraction: must lie in [0, 1)")
    for name, bounds in d.factor_ranges.items():
        if name not in FACTORS:
            errors.append(f"dataset.factor_ranges: unknown factor {name!r}")
        elif len(bounds) != 2 or not bounds[0] < bounds[1]:
            errors.append(f"dataset.factor_ranges.{name}: expected [lo, hi] with lo < hi, got {bounds}")
    if d.concept_style not in ("polygon", "catalog"):
        errors.append(f"dataset.concept_style: unknown style {d.concept_style!r}")
    if m.architecture not in ARCHITECTURES:
        errors.append(f"model.architecture: unknown architecture {m.architecture!r}; choose from {ARCHITECTURES}")
    if m.output_dim < 1:
        errors.append("model.output_dim: must be >= 1")
    if not 0.0 <= l.alpha <= 1.0:
        errors.append(f"lma.alpha: must lie in [0, 1], got {l.alpha}")
    if l.mode not in MODES:
        errors.append(f"lma.mode: unknown mode {l.mode!r}; choose from {MODES}")
    if l.backend not in BACKEND_KINDS:
        errors.append(f"lma.backend: unknown backend {l.backend!r}; choose from {BACKEND_KINDS}")
    if l.prior not in PRIORS:
        errors.append(f"lma.prior: unknown prior {l.prior!r}; choose from {PRIORS}")
    if l.prior == "finite-set" and (l.n_views is None or l.n_views < 1):
        errors.append("lma.n_views: finite-set prior needs n_views >= 1")
    if l.mode != "off":
        if l.backend == "oracle-manifold" and d.name != "synthetic" and not l.generator_checkpoint:
            errors.append("lma.backend: oracle-manifold needs a synthetic dataset")
        if l.backend == "instance-conditioned" and not l.generator_checkpoint:
            errors.append("lma.generator_checkpoint: required for the instance-conditioned backend")
        if l.backend == "traversal" and d.name != "synthetic" and not l.generator_checkpoint:
            errors.append("lma.backend: traversal needs generator-born records (synthetic) or a generator checkpoint")
    if not 0.0 < l.coverage <= 1.0:
        errors.append("lma.coverage: must lie in (0, 1]")
    if not 0.0 <= l.corruption_rate <= 1.0:
        errors.append("lma.corruption_rate: must lie in [0, 1]")
    if l.artifact_strength < 0:
        errors.append("lma.artifact_strength: must be >= 0")
    if l.k < 1:
        errors.append("lma.k: must be >= 1")
    if l.traversal_sigma < 0:
        errors.append("lma.traversal_sigma: must be >= 0")
    if l.embedder not in ARCHITECTURES:
        errors.append(f"lma.embedder: unknown architecture {l.embedder!r}")
    if t.method not in METHODS:
        errors.append(f"train.method: unknown method {t.method!r}")
    if t.batch_size < 1:
        errors.append("train.batch_size: must be >= 1")
    if t.epochs < 0:
        errors.append("train.epochs: must be >= 0")
    if t.base_lr <= 0:
        errors.append("train.base_lr: must be positive")
    if p.batch_size < 1 or p.epochs < 0:
        errors.append("probe: batch_size must be >= 1 and epochs >= 0")
    if e.invariance_views < 2:
        errors.append("evaluation.invariance_views: must be >= 2")
    if e.fid_samples < 0:
        errors.append("evaluation.fid_samples: must be >= 0")
    return errors


def config_fields():
    """``(dotted_name, type_hint, default)`` for every leaf field, in schema order."""
    out = [("seeds", list[int], [0]), ("output_dir", str, "")]
    for section, cls in _dataclass_sections().items():
        hints = typing.get_type_hints(cls)
        defaults = cls()
        for f in dataclasses.fields(cls):
            out.append((f"{section}.{f.name}", hints[f.name], getattr(defaults, f.name)))
    return out


def synthetic_benchmark(**overrides) -> ExperimentConfig:
    """The desk-scale directional benchmark: 20 concepts x 200 views, rotation + hue, tiny SimSiam.

    Hue varies within +-0.3 of each concept's base hue, wider than the
    handcrafted hue jitter, so the orbit holds nuisance variation that HCA
    alone does not reach.  The oracle is exact.
    """
    blob = ExperimentConfig().to_dict()
    blob["dataset"].update(n_concepts=20, views_per_concept=200, factors=["rotation", "hue"], resolution=32,
                           factor_ranges={"hue": [-0.3, 0.3]})
    blob["lma"].update(alpha=0.3, mode="lma", backend="oracle-manifold")
    blob["hca"].update(output_scale=32)
    blob["train"].update(method="simsiam", base_lr=0.1, batch_size=128, epochs=20, weight_decay=5e-4)
    blob["probe"].update(epochs=1000)
    blob["seeds"] = [0, 1, 2]
    cfg = parse_config(blob)
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------- building blocks

_DATASET_CACHE: dict[str, DatasetHandle] = {}


def build_dataset(dc: DatasetConfig) -> DatasetHandle:
    key = json.dumps(asdict(dc), sort_keys=True)
    if key not in _DATASET_CACHE:
        if dc.name == "synthetic":
            if dc.root:
                handle = load_synthetic(dc.root)
            else:
                handle = make_synthetic_manifold(dc.n_concepts, dc.views_per_concept, set(dc.factors),
                                                 dc.resolution, dc.seed, holdout_fraction=dc.holdout_fraction,
                                                 concept_style=dc.concept_style,
                                                 factor_ranges=dc.factor_ranges)
        else:
            handle = load_dataset(dc.name, dc.root, class_list=dc.class_list)
        _DATASET_CACHE.clear()
        _DATASET_CACHE[key] = handle
    return _DATASET_CACHE[key]


def build_embedder(cfg: ExperimentConfig, dataset: DatasetHandle) -> EncoderSpec:
    l = cfg.lma
    if l.embedder_checkpoint:
        enc = load_encoder_checkpoint(l.embedder_checkpoint)
        enc.normalize_output = l.normalize_embeddings
        return enc
    return build_encoder(l.embedder, l.embedder_dim, dataset.resolution, normalize_output=l.normalize_embeddings,
                         seed=0)


def _oracle(cfg: ExperimentConfig, dataset: DatasetHandle) -> OracleManifoldBackend:
    l = cfg.lma
    opts = dict(coverage=l.coverage, corruption_rate=l.corruption_rate, artifact_strength=l.artifact_strength)
    if l.generator_checkpoint:
        return load_generator_checkpoint(l.generator_checkpoint, "oracle-manifold", **opts)
    if dataset.synthetic is None:
        raise ExperimentError("oracle-manifold backend needs a synthetic dataset")
    return OracleManifoldBackend(dataset.synthetic, **opts)


def build_backend(cfg: ExperimentConfig, dataset: DatasetHandle, embedder: EncoderSpec) -> GeneratorBackend:
    l = cfg.lma
    if l.backend == "oracle-manifold":
        return _oracle(cfg, dataset)
    if l.backend == "knn":
        emb = embed_dataset(embedder, dataset, cfg.dataset.pretrain_split, normalize=l.normalize_embeddings)
        index = build_index(emb, l.k, l.include_self)
        index.precompute()
        return KnnBackend(index, dataset)
    if l.backend == "traversal":
        if l.generator_checkpoint:
            return load_generator_checkpoint(l.generator_checkpoint, "traversal", sigma=l.traversal_sigma)
        return TraversalBackend(_oracle(cfg, dataset), sigma=l.traversal_sigma)
    return load_generator_checkpoint(l.generator_checkpoint, "instance-conditioned")


def build_prior(cfg: ExperimentConfig, backend: GeneratorBackend | None, seed: int) -> LatentPrior | None:
    if backend is None or backend.kind in ("knn", "traversal"):
        return None
    if cfg.lma.prior == "finite-set":
        return restrict_prior_to_finite(backend.latent_dim, cfg.lma.n_views, RngStream("finite-prior", seed))
    return LatentPrior("standard-normal", backend.latent_dim)


def build_policy(cfg: ExperimentConfig, dataset: DatasetHandle, embedder: EncoderSpec, seed: int) -> LmaPolicy:
    backend = None if cfg.lma.mode == "off" else build_backend(cfg, dataset, embedder)
    return LmaPolicy(alpha=cfg.lma.alpha, mode=cfg.lma.mode, backend=backend, prior=build_prior(cfg, backend, seed),
                     mix_shared_base=cfg.lma.mix_shared_base)


def invariance_groups(encoder: EncoderSpec, dataset: DatasetHandle, views: int = 16) -> dict:
    """Representation groups for the invariance report.

    ``orbit``: held-out views grouped by orbit.  One entry per varying
    factor: for every concept, ``views`` renders that share all latent
    coordinates except those of the factor.
    """
    if dataset.synthetic is None:
        raise ExperimentError(f"{dataset.name} has no nuisance orbits; invariance needs a synthetic dataset")
    out = {}
    split = "val" if dataset.splits.get("val", 0) >= 2 * dataset.num_classes else "train"
    emb = embed_dataset(encoder, dataset, split, normalize=False)
    groups: dict[int, list[int]] = {}
    for i, o in zip(emb.ids, dataset.orbit_ids(emb.ids)):
        groups.setdefault(int(o), []).append(int(i))
    out["orbit"] = (emb, {k: v for k, v in groups.items() if len(v) >= 2})
    spec = dataset.synthetic
    for factor in spec.factors:
        coords = [3, 4] if factor == "translation" else [FACTORS.index(factor)]
        rng = RngStream("invariance-groups", spec.seed).child(factor)
        images, fgroups = [], {}
        for c in range(len(spec.concepts)):
            base = rng.normal(size=LATENT_DIM)
            start = len(images)
            for _ in range(views):
                z = base.copy()
                z[coords] = rng.normal(size=len(coords))
                images.append(spec.render(c, z))
            fgroups[c] = list(range(start, len(images)))
        values = embed_array(encoder, np.stack(images), normalize=False)
        out[factor] = (EmbeddingMatrix(values, list(range(len(images))), normalized=False), fgroups)
    return out


def backend_fid(backend: GeneratorBackend, prior: LatentPrior | None, dataset: DatasetHandle, split: str,
                feature_encoder: EncoderSpec, n: int, seed: int = 0, embedder: EncoderSpec | None = None) -> float:
    """Frechet distance between features of real records and of backend views conditioned on them."""
    rng = RngStream("backend-fid", seed)
    ids = dataset.ids(split)
    ids = ids[rng.permutation(len(ids))[:min(n, len(ids))]]
    real = dataset.pixels(ids)
    fake = np.stack([sample_view(backend, dataset.record(int(i)), prior, embedder, rng.child(int(i)))
                     for i in ids])
    fr = embed_array(feature_encoder, real, normalize=False)
    ff = embed_array(feature_encoder, fake, normalize=False)
    return frechet_distance(fr, ff)


# ---------------------------------------------------------------- artifacts

def artifact_root(cfg: ExperimentConfig | None = None) -> Path:
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(ARTIFACT_ENV, DEFAULT_ARTIFACT_ROOT))


def _write_json(path: Path, blob) -> None:
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


@dataclass
class RunArtifact:
    path: Path
    config_hash: str
    config: ExperimentConfig
    metrics: list[dict]
    probe: dict
    invariance: dict | None
    fid: dict | None
    checkpoints: list[Path]
    plots: list[Path] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seeds[0]

    @property
    def top1(self) -> float:
        return float(self.probe["top1"])

    @property
    def orbit_cosine(self) -> float | None:
        if not self.invariance or "cosine" not in self.invariance:
            return None
        return self.invariance["cosine"].get("orbit")

    @property
    def n_views(self) -> float:
        lc = self.config.lma
        return float(lc.n_views) if lc.prior == "finite-set" else math.inf

    @classmethod
    def load(cls, path: str | Path) -> "RunArtifact":
        path = Path(path)
        if not (path / "COMPLETE").exists():
            raise ExperimentError(f"{path} is not a complete run directory")
        blob = json.loads((path / "config.json").read_text())
        cfg = parse_config(blob["config"])
        metrics = [json.loads(line) for line in (path / "metrics.jsonl").read_text().splitlines() if line]
        probe = json.loads((path / "probe.json").read_text())
        inv = json.loads((path / "invariance.json").read_text()) if (path / "invariance.json").exists() else None
        fid = json.loads((path / "fid.json").read_text()) if (path / "fid.json").exists() else None
        ckpts = sorted((path / "checkpoints").glob("*.pt")) + [path / "encoder.pt"]
        return cls(path, blob["config_hash"], cfg, metrics, probe, inv, fid, ckpts)


def run_pretrain(config: ExperimentConfig, seed: int | None = None) -> RunArtifact:
    """Pretrain, probe and measure invariance for one seed; persists a write-once run directory."""
    seed = config.seeds[0] if seed is None else int(seed)
    cfg = config.for_seed(seed)
    h = cfg.hash
    root = artifact_root(cfg)
    final = root / h
    if (final / "COMPLETE").exists():
        log.info("reusing run %s", h[:12])
        return RunArtifact.load(final)
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / f".tmp-{h[:16]}-{uuid.uuid4().hex[:8]}"
    tmp.mkdir()
    try:
        _execute(cfg, h, seed, tmp)
        (tmp / "COMPLETE").write_text(h + "\n")
        try:
            os.rename(tmp, final)
        except OSError:
            # a concurrent cell finished the same hash first
            if not (final / "COMPLETE").exists():
                raise
            shutil.rmtree(tmp, ignore_errors=True)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return RunArtifact.load(final)


def _execute(cfg: ExperimentConfig, h: str, seed: int, out: Path) -> None:
    stamp = {"config_hash": h}
    _write_json(out / "config.json", {**stamp, "schema_version": SCHEMA_VERSION, "config": cfg.to_dict()})
    dataset = build_dataset(cfg.dataset)
    embedder = build_embedder(cfg, dataset)
    policy = build_policy(cfg, dataset, embedder, seed)
    backbone = build_encoder(cfg.model.architecture, cfg.model.output_dim, dataset.resolution,
                             normalize_output=False, seed=seed, width=cfg.model.width)
    (out / "metrics.jsonl").touch()
    model, _ = pretrain(dataset, policy, cfg.hca, cfg.train, backbone=backbone, embedder=embedder,
                        split=cfg.dataset.pretrain_split, checkpoint_dir=out / "checkpoints",
                        metrics_path=out / "metrics.jsonl", extra_log={**stamp, "seed": seed})
    encoder = model.spec
    save_encoder_checkpoint(encoder, out / "encoder.pt", meta=stamp)
    probe = train_linear_probe(encoder, dataset, cfg.probe)
    _write_json(out / "probe.json", {**stamp, "encoder_id": encoder.encoder_id, **probe.report(),
                                     "probe_config": asdict(cfg.probe)})
    if cfg.evaluation.invariance and dataset.synthetic is not None:
        report = invariance_report(invariance_groups(encoder, dataset, cfg.evaluation.invariance_views),
                                   encoder_id=encoder.encoder_id)
        _write_json(out / "invariance.json", {**stamp, **report.to_dict(), "records": report.records(h)})
    if policy.backend is not None and cfg.evaluation.fid_samples > 0:
        fid = backend_fid(policy.backend, policy.prior, dataset, cfg.dataset.pretrain_split, embedder,
                          cfg.evaluation.fid_samples, seed=seed, embedder=embedder)
        _write_json(out / "fid.json", {**stamp, "fid": fid, "encoder_id": embedder.encoder_id,
                                       "n": cfg.evaluation.fid_samples, "backend": policy.backend.kind})


def run_seeds(config: ExperimentConfig, workers: int = 1) -> list[RunArtifact]:
    return run_cells([config.for_seed(s) for s in config.seeds], workers)


def run_cells(configs: list[ExperimentConfig], workers: int = 1) -> list[RunArtifact]:
    """Run single-seed configs, optionally as independent worker processes."""
    if workers <= 1 or len(configs) <= 1:
        return [run_pretrain(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        paths = list(pool.map(_run_cell_path, [c.to_dict() for c in configs]))
    return [RunArtifact.load(p) for p in paths]


def _run_cell_path(blob: dict) -> str:
    return str(run_pretrain(parse_config(blob)).path)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    kind: str
    rows: list[dict]
    artifacts: list[RunArtifact]
    outputs: list[Path]


def _mean_row(label: dict, arts: list[RunArtifact]) -> dict:
    top1 = [a.top1 for a in arts]
    row = {**label, "top1": float(np.mean(top1)), "top1_per_seed": top1, "seeds": [a.seed for a in arts]}
    cos = [a.orbit_cosine for a in arts if a.orbit_cosine is not None]
    if cos:
        row["orbit_cosine"] = float(np.mean(cos))
    fids = [a.fid["fid"] for a in arts if a.fid]
    if fids:
        row["fid"] = float(np.mean(fids))
    return row


def _sweep(kind: str, config: ExperimentConfig, cells: list[tuple[dict, ExperimentConfig]], workers: int,
           plot: bool) -> SweepResult:
    singles = [(label, c.for_seed(s)) for label, c in cells for s in config.seeds]
    arts = run_cells([c for _, c in singles], workers)
    rows, all_arts = [], []
    per = len(config.seeds)
    for j, (label, _) in enumerate(cells):
        group = arts[j * per:(j + 1) * per]
        rows.append(_mean_row(label, group))
        all_arts.extend(group)
    outputs = []
    if plot:
        tag = hashlib.sha256(json.dumps([kind] + [a.config_hash for a in all_arts]).encode()).hexdigest()[:16]
        out_dir = artifact_root(config) / "sweeps" / f"{kind}-{tag}"
        outputs = emit_plots(all_arts, out_dir)
        outputs.append(_write_table(out_dir / f"{kind}.csv", rows))
    return SweepResult(kind, rows, all_arts, outputs)


def sweep_alpha(config: ExperimentConfig, alphas, modes=("lma", "mix"), workers: int = 1,
                plot: bool = True) -> SweepResult:
    """One cell per (mode, alpha) with shared seeds; rows ``(mode, alpha, top1)``."""
    for a in alphas:
        if not 0.0 <= float(a) <= 1.0:
            raise ConfigError([f"alpha {a} outside [0, 1]"])
    cells = [({"mode": m, "alpha": float(a)}, config.replace(**{"lma.mode": m, "lma.alpha": float(a)}))
             for m in modes for a in alphas]
    return _sweep("alpha", config, cells, workers, plot)


def parse_view_count(n) -> float:
    if isinstance(n, str) and n.strip().lower() in (INFINITE, "infinite", "infinity", "∞"):
        return math.inf
    if isinstance(n, float) and math.isinf(n):
        return math.inf
    value = int(n)
    if value < 1:
        raise ConfigError([f"view count must be >= 1 or {INFINITE!r}, got {n!r}"])
    return value


def sweep_views(config: ExperimentConfig, view_counts, workers: int = 1, plot: bool = True) -> SweepResult:
    """Finite-view prior ablation; the infinite entry uses the standard-normal prior."""
    cells = []
    for n in view_counts:
        n = parse_view_count(n)
        if math.isinf(n):
            c = config.replace(**{"lma.prior": "standard-normal", "lma.n_views": None})
        else:
            c = config.replace(**{"lma.prior": "finite-set", "lma.n_views": int(n)})
        cells.append(({"n_views": INFINITE if math.isinf(n) else int(n)}, c))
    return _sweep("views", config, cells, workers, plot)


def sweep_k(config: ExperimentConfig, ks, workers: int = 1, plot: bool = True) -> SweepResult:
    """Rebuild neighbour structures per ``k``; rows ``(k, fid, top1)``."""
    dataset = build_dataset(config.dataset)
    n = dataset.splits[config.dataset.pretrain_split]
    limit = n if config.lma.include_self else n - 1
    bad = [k for k in ks if not 1 <= int(k) <= limit]
    if bad:
        raise ConfigError([f"k {k} outside [1, {limit}]" for k in bad])
    fid_samples = config.evaluation.fid_samples or 1000
    cells = [({"k": int(k)}, config.replace(**{"lma.k": int(k), "evaluation.fid_samples": fid_samples}))
             for k in ks]
    return _sweep("k", config, cells, workers, plot)


def sweep_quality(config: ExperimentConfig, corruption_rates, workers: int = 1, plot: bool = True) -> SweepResult:
    """Accuracy against backend FID, degrading the oracle through its orbit-corruption rate."""
    fid_samples = config.evaluation.fid_samples or 1000
    cells = [({"corruption_rate": float(r)},
              config.replace(**{"lma.corruption_rate": float(r), "evaluation.fid_samples": fid_samples}))
             for r in corruption_rates]
    return _sweep("quality", config, cells, workers, plot)


# ---------------------------------------------------------------- plots

def _write_table(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
    return path


def _comparable(artifacts: list[RunArtifact]) -> None:
    if not artifacts:
        raise ExperimentError("no artifacts to plot")
    ref = artifacts[0].config
    for a in artifacts[1:]:
        for section in ("dataset", "probe"):
            if asdict(getattr(a.config, section)) != asdict(getattr(ref, section)):
                raise ExperimentError(f"incomparable artifacts: {section} differs between "
                                      f"{artifacts[0].config_hash[:12]} and {a.config_hash[:12]}")


def _run_row(a: RunArtifact) -> dict:
    lc = a.config.lma
    return {"config_hash": a.config_hash, "seed": a.seed, "mode": lc.mode, "alpha": lc.alpha, "backend": lc.backend,
            "n_views": INFINITE if math.isinf(a.n_views) else int(a.n_views), "k": lc.k,
            "corruption_rate": lc.corruption_rate, "fid": a.fid["fid"] if a.fid else None,
            "top1": a.top1, "top5": float(a.probe["top5"]), "orbit_cosine": a.orbit_cosine}


def emit_plots(artifacts: list[RunArtifact], out_dir: str | Path) -> list[Path]:
    """Accuracy vs alpha / views / FID plus an invariance radar chart, each with its data table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _comparable(artifacts)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [_run_row(a) for a in artifacts]
    paths = [_write_table(out_dir / "runs.csv", rows)]

    def mean_by(key_fn, subset):
        acc: dict = {}
        for a in subset:
            acc.setdefault(key_fn(a), []).append(a.top1)
        return sorted((k, float(np.mean(v))) for k, v in acc.items())

    # accuracy vs alpha, one curve per mode
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    table = []
    for mode in sorted({a.config.lma.mode for a in artifacts}):
        pts = mean_by(lambda a: a.config.lma.alpha, [a for a in artifacts if a.config.lma.mode == mode])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        table.extend({"mode": mode, "alpha": x, "top1": y} for x, y in pts)
    ax.set_xlabel("alpha")
    ax.set_ylabel("top-1 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_vs_alpha.png", dpi=120)
    plt.close(fig)
    paths += [out_dir / "accuracy_vs_alpha.png", _write_table(out_dir / "accuracy_vs_alpha.csv", table)]

    # accuracy vs number of views; the infinite prior sits one step right of the largest count
    pts = mean_by(lambda a: a.n_views, artifacts)
    finite = [p[0] for p in pts if not math.isinf(p[0])]
    inf_x = (max(finite) * 10 if finite else 1.0)
    xs = [inf_x if math.isinf(p[0]) else p[0] for p in pts]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, [p[1] for p in pts], marker="o")
    ax.set_xscale("log")
    ax.set_xticks(xs)
    ax.set_xticklabels([INFINITE if math.isinf(p[0]) else str(int(p[0])) for p in pts])
    ax.set_xlabel("distinct views per condition")
    ax.set_ylabel("top-1 (%)")
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_vs_views.png", dpi=120)
    plt.close(fig)
    paths += [out_dir / "accuracy_vs_views.png",
              _write_table(out_dir / "accuracy_vs_views.csv",
                           [{"n_views": INFINITE if math.isinf(k) else int(k), "top1": v} for k, v in pts])]

    # accuracy vs backend FID
    with_fid = [a for a in artifacts if a.fid]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if with_fid:
        pts = sorted((a.fid["fid"], a.top1) for a in with_fid)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
    else:
        pts = []
        ax.text(0.5, 0.5, "no FID recorded", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("backend FID")
    ax.set_ylabel("top-1 (%)")
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_vs_fid.png", dpi=120)
    plt.close(fig)
    paths += [out_dir / "accuracy_vs_fid.png",
              _write_table(out_dir / "accuracy_vs_fid.csv", [{"fid": x, "top1": y} for x, y in pts])]

    # invariance: radar of mean pairwise cosine per factor, one polygon per run
    inv_rows = []
    for a in artifacts:
        if a.invariance and "cosine" in a.invariance:
            for factor, value in a.invariance["cosine"].items():
                inv_rows.append({"config_hash": a.config_hash, "mode": a.config.lma.mode, "alpha": a.config.lma.alpha,
                                 "seed": a.seed, "factor": factor, "cosine": value,
                                 "mahalanobis": a.invariance["mahalanobis"][factor]})
    factors = sorted({r["factor"] for r in inv_rows})
    fig = plt.figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot(projection="polar")
    if factors:
        angles = np.linspace(0, 2 * np.pi, len(factors), endpoint=False).tolist()
        for a in artifacts:
            vals = {r["factor"]: r["cosine"] for r in inv_rows if r["config_hash"] == a.config_hash}
            if not vals:
                continue
            ys = [vals.get(f, np.nan) for f in factors]
            label = f"{a.config.lma.mode} a={a.config.lma.alpha:g} s={a.seed}"
            ax.plot(angles + angles[:1], ys + ys[:1], marker="o", label=label)
        ax.set_xticks(angles)
        ax.set_xticklabels(factors)
        if len(artifacts) <= 8:
            ax.legend(fontsize=6, loc="lower right", bbox_to_anchor=(1.3, -0.1))
    fig.tight_layout()
    fig.savefig(out_dir / "invariance_radar.png", dpi=120)
    plt.close(fig)
    paths += [out_dir / "invariance_radar.png", _write_table(out_dir / "invariance.csv", inv_rows)]
    for a in artifacts:
        a.plots = paths
    return paths
