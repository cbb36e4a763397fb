"""Parametric-shape datasets with known nuisance orbits.

Each concept is a fixed shape/colour description.  A view of a concept is
rendered from a nuisance latent ``z``: coordinate ``j`` is pushed through
the standard-normal CDF and mapped linearly onto the range of factor
``j``.  Sampling ``z ~ N(0, I)`` therefore draws factor values uniformly,
and the dataset records are exactly ``render(concept, z_record)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from ..rng import RngStream
from .records import DatasetError, DatasetHandle, build_handle, check_pixels

FACTORS = ("rotation", "hue", "scale", "translation")

# latent coordinates: rotation, hue, scale, tx, ty; then spare coordinates
# consumed by degraded generator backends
NUISANCE_DIM = 5
LATENT_DIM = 10

FACTOR_RANGES = {
    "rotation": (0.0, 2 * np.pi),
    "hue": (0.0, 1.0),
    "scale": (0.55, 0.95),
    "translation": (-0.2, 0.2),
}
FACTOR_DEFAULTS = {"rotation": 0.0, "hue": 0.0, "scale": 0.8, "translation": 0.0}

SHAPES = ("ellipse", "triangle", "square", "pentagon", "hexagon",
          "star", "cross", "crescent", "bar", "trefoil")
BACKGROUND = np.array([0.18, 0.18, 0.18], dtype=np.float32)
SUPERSAMPLE = 2


@dataclass(frozen=True)
class Concept:
    shape: str
    hollow: bool
    hue: float
    saturation: float
    value: float
    # vertex radii at equally spaced angles, for shape == "polygon"
    radii: tuple[float, ...] = ()


@dataclass
class SyntheticSpec:
    """Everything needed to re-render any view of any concept."""

    concepts: list[Concept]
    factors: tuple[str, ...]
    resolution: int
    seed: int
    # per-factor (lo, hi) overrides of FACTOR_RANGES
    ranges: dict = field(default_factory=dict)

    def factor_range(self, name: str) -> tuple[float, float]:
        return tuple(self.ranges.get(name, FACTOR_RANGES[name]))

    def factor_values(self, latent: np.ndarray, coverage: float = 1.0) -> dict:
        """Map a latent onto factor values; unlisted factors stay at defaults.

        ``coverage < 1`` shrinks every range around its midpoint.
        """
        u = ndtr(np.asarray(latent[:NUISANCE_DIM], dtype=np.float64))
        u = 0.5 + coverage * (u - 0.5)
        out = dict(FACTOR_DEFAULTS)
        out["tx"] = out["ty"] = out.pop("translation")
        for name in self.factors:
            lo, hi = self.factor_range(name)
            if name == "translation":
                out["tx"] = lo + (hi - lo) * u[3]
                out["ty"] = lo + (hi - lo) * u[4]
            else:
                out[name] = lo + (hi - lo) * u[FACTORS.index(name)]
        return out

    def render(self, concept_id: int, latent: np.ndarray, coverage: float = 1.0) -> np.ndarray:
        factors = self.factor_values(latent, coverage)
        return render_concept(self.concepts[concept_id], factors, self.resolution)

    def to_json(self) -> dict:
        return {
            "concepts": [asdict(c) for c in self.concepts],
            "factors": list(self.factors),
            "resolution": self.resolution,
            "seed": self.seed,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_json(cls, blob: dict) -> "SyntheticSpec":
        return cls(
            concepts=[Concept(**{**c, "radii": tuple(c.get("radii", ()))}) for c in blob["concepts"]],
            factors=tuple(blob["factors"]),
            resolution=int(blob["resolution"]),
            seed=int(blob["seed"]),
            ranges={k: tuple(float(x) for x in v) for k, v in blob.get("ranges", {}).items()},
        )


def _polygon_mask(u, v, n, phase=np.pi / 2):
    inside = np.ones(u.shape, dtype=bool)
    apothem = np.cos(np.pi / n)
    for k in range(n):
        a = phase + 2 * np.pi * k / n + np.pi / n
        inside &= u * np.cos(a) + v * np.sin(a) <= apothem
    return inside


def _star_polygon_mask(radii: tuple[float, ...], u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside test for a polygon whose vertices sit at radii ``radii[k]``, angles ``2 pi k / n``."""
    rad = np.asarray(radii)
    n = len(rad)
    phi = np.arctan2(v, u) % (2 * np.pi)
    t = phi / (2 * np.pi) * n
    k = np.floor(t).astype(np.int64) % n
    a0, a1 = 2 * np.pi * k / n, 2 * np.pi * (k + 1) / n
    r0, r1 = rad[k], rad[(k + 1) % n]
    p0x, p0y = r0 * np.cos(a0), r0 * np.sin(a0)
    dx, dy = r1 * np.cos(a1) - p0x, r1 * np.sin(a1) - p0y
    ex, ey = np.cos(phi), np.sin(phi)
    # distance along the ray at angle phi to the edge it crosses
    reach = (p0x * dy - p0y * dx) / (ex * dy - ey * dx)
    return np.hypot(u, v) <= reach


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, radii: tuple[float, ...] = ()) -> np.ndarray:
    if shape == "polygon":
        return _star_polygon_mask(radii, u, v)
    if shape == "ellipse":
        return u**2 + (v / 0.55) ** 2 <= 1.0
    if shape == "triangle":
        return _polygon_mask(u, v, 3)
    if shape == "square":
        return _polygon_mask(u, v, 4, phase=np.pi / 4)
    if shape == "pentagon":
        return _polygon_mask(u, v, 5)
    if shape == "hexagon":
        return _polygon_mask(u, v, 6)
    if shape == "star":
        rho, phi = np.hypot(u, v), np.arctan2(v, u) - np.pi / 2
        tri = np.abs(((phi * 5 / (2 * np.pi)) % 1.0) - 0.5) * 2  # 1 at tips
        return rho <= 0.42 + 0.58 * tri
    if shape == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(u) <= 0.95) & (np.abs(v) <= 0.3))
    if shape == "crescent":
        return (u**2 + v**2 <= 1.0) & ((u - 0.45) ** 2 + v**2 > 0.75**2)
    if shape == "bar":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.4)
    if shape == "trefoil":
        rho, phi = np.hypot(u, v), np.arctan2(v, u)
        return rho <= 0.55 + 0.4 * np.cos(3 * phi)
    raise DatasetError(f"unknown shape {shape!r}")


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = (h % 1.0) * 6.0
    i = int(np.floor(h)) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


_GRIDS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _grid(n: int):
    if n not in _GRIDS:
        c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        x, y = np.meshgrid(c, -c)
        _GRIDS[n] = (x, y)
    return _GRIDS[n]


def render_concept(concept: Concept, factors: dict, resolution: int) -> np.ndarray:
    """Rasterise one view with 2x2 supersampled coverage."""
    n = resolution * SUPERSAMPLE
    x, y = _grid(n)
    x = x - factors["tx"]
    y = y - factors["ty"]
    c, s = np.cos(-factors["rotation"]), np.sin(-factors["rotation"])
    scale = factors["scale"]
    u = (c * x - s * y) / scale
    v = (s * x + c * y) / scale
    mask = _shape_mask(concept.shape, u, v, concept.radii)
    if concept.hollow:
        mask &= ~_shape_mask(concept.shape, u / 0.5, v / 0.5, concept.radii)
    cov = mask.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))
    fill = hsv_to_rgb(concept.hue + factors["hue"], concept.saturation, concept.value)
    cov = cov[..., None].astype(np.float32)
    img = BACKGROUND * (1.0 - cov) + fill * cov
    return np.clip(img, 0.0, 1.0)


def make_concepts(n_concepts: int, rng: RngStream, style: str = "polygon") -> list[Concept]:
    """Concept descriptions.

    ``polygon``: random star-shaped polygons (5-8 vertices, radii in
    [0.45, 1]) sharing one saturation/value, so concepts differ only in
    outline.  ``catalog``: the named shapes of :data:`SHAPES`, solid then
    hollow, with random colours.
    """
    concepts = []
    for i in range(n_concepts):
        if style == "polygon":
            n_vertices = int(rng.integers(5, 9))
            concepts.append(Concept(shape="polygon", hollow=False, hue=float(rng.uniform(0.0, 1.0)),
                                    saturation=0.8, value=0.9,
                                    radii=tuple(float(r) for r in rng.uniform(0.45, 1.0, size=n_vertices))))
        elif style == "catalog":
            concepts.append(Concept(
                shape=SHAPES[i % len(SHAPES)],
                hollow=(i // len(SHAPES)) % 2 == 1,
                hue=float(rng.uniform(0.0, 1.0)),
                saturation=float(rng.uniform(0.6, 1.0)),
                value=float(rng.uniform(0.7, 1.0)),
            ))
        else:
            raise DatasetError(f"unknown concept style {style!r}")
    return concepts


def make_synthetic_manifold(n_concepts: int, views_per_concept: int, factors=("rotation", "hue"),
                            resolution: int = 32, seed: int = 0,
                            holdout_fraction: float = 0.0, concept_style: str = "polygon",
                            factor_ranges: dict | None = None) -> DatasetHandle:
    """Render ``n_concepts * views_per_concept`` records with orbit labels.

    The last ``round(views_per_concept * holdout_fraction)`` views of every
    orbit go to the ``val`` split; the rest are ``train``.  Labels equal
    orbit ids.  ``factor_ranges`` overrides entries of :data:`FACTOR_RANGES`
    (hue is an offset from each concept's base hue).
    """
    if n_concepts < 1 or views_per_concept < 1:
        raise DatasetError("n_concepts and views_per_concept must be >= 1")
    unknown = set(factors) - set(FACTORS)
    if unknown:
        raise DatasetError(f"unsupported factor(s) {sorted(unknown)}; allowed: {FACTORS}")
    factors = tuple(f for f in FACTORS if f in set(factors))
    if not 0.0 <= holdout_fraction < 1.0:
        raise DatasetError("holdout_fraction must lie in [0, 1)")
    ranges = {}
    for name, bounds in (factor_ranges or {}).items():
        if name not in FACTORS:
            raise DatasetError(f"factor_ranges: unknown factor {name!r}")
        lo, hi = (float(b) for b in bounds)
        if not lo < hi:
            raise DatasetError(f"factor_ranges[{name!r}]: need lo < hi, got {bounds}")
        if name == "scale" and lo <= 0:
            raise DatasetError("factor_ranges['scale']: scale must stay positive")
        ranges[name] = (lo, hi)

    root = RngStream("synthetic", seed)
    spec = SyntheticSpec(make_concepts(n_concepts, root.child("concepts"), concept_style), factors, resolution, seed,
                         ranges)
    latents = root.child("latents").normal(size=(n_concepts, views_per_concept, LATENT_DIM))

    n_val = int(round(views_per_concept * holdout_fraction))
    n_train = views_per_concept - n_val
    parts = []
    for tag, sl in (("train", slice(0, n_train)), ("val", slice(n_train, views_per_concept))):
        z = latents[:, sl].reshape(-1, LATENT_DIM)
        if len(z) == 0:
            continue
        orbits = np.repeat(np.arange(n_concepts), sl.stop - sl.start)
        pixels = np.stack([spec.render(int(o), zz) for o, zz in zip(orbits, z)])
        parts.append((tag, dict(count=len(z), pixels=pixels, labels=orbits.copy(),
                                orbit_ids=orbits, latents=z,
                                factors=[spec.factor_values(zz) for zz in z])))
    handle = build_handle(f"synthetic-{n_concepts}x{views_per_concept}", resolution, n_concepts,
                          parts, synthetic=spec)
    for store in handle.stores.values():
        check_pixels(store.pixels.reshape(-1, resolution, 3))
    return handle


def save_synthetic(handle: DatasetHandle, directory: str | Path) -> Path:
    """Write PNG images plus ``manifest.jsonl`` (header line, then one line per record)."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    spec: SyntheticSpec = handle.synthetic
    lines = [json.dumps({"dataset": handle.name, "num_classes": handle.num_classes,
                         "spec": spec.to_json()})]
    for split in handle.stores:
        for rec in handle.records(split):
            fname = f"images/{rec.id:07d}.png"
            Image.fromarray(np.round(rec.pixels * 255).astype(np.uint8)).save(directory / fname)
            lines.append(json.dumps({
                "id": rec.id, "orbit_id": rec.orbit_id, "label": rec.label, "split": split,
                "file": fname, "factors": {k: float(v) for k, v in rec.factors.items()},
                "latent": [float(x) for x in rec.latent],
            }))
    path = directory / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_synthetic(directory: str | Path) -> DatasetHandle:
    """Inverse of :func:`save_synthetic`; pixels come back quantised to 8 bits."""
    from PIL import Image

    directory = Path(directory)
    path = directory / "manifest.jsonl"
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    header, rows = rows[0], rows[1:]
    spec = SyntheticSpec.from_json(header["spec"])
    parts = []
    for split in ("train", "val", "test", "unlabeled"):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        sel.sort(key=lambda r: r["id"])
        try:
            pixels = np.stack([np.asarray(Image.open(directory / r["file"]).convert("RGB")) for r in sel])
        except FileNotFoundError as exc:
            raise DatasetError(f"missing image for split {split!r}: {exc.filename}") from None
        parts.append((split, dict(
            count=len(sel), pixels=pixels,
            labels=np.array([r["label"] for r in sel]),
            orbit_ids=np.array([r["orbit_id"] for r in sel]),
            latents=np.array([r["latent"] for r in sel]),
            factors=[r["factors"] for r in sel],
        )))
    return build_handle(header["dataset"], spec.resolution, header["num_classes"], parts, synthetic=spec)
