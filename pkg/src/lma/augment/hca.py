"""Handcrafted augmentation: crop -> jitter -> grayscale -> blur -> flip.

All operators work on float ``HxWx3`` arrays in [0, 1] and draw their
parameters from an explicit :class:`~lma.rng.RngStream`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..rng import RngStream

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class HcaConfig:
    crop_area_range: tuple[float, float] = (0.2, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    output_scale: int = 32
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue: tuple[float, float] = (-0.1, 0.1)
    p_jitter: float = 0.8
    p_grayscale: float = 0.2
    blur_radius_range: tuple[float, float] = (1.0, 2.0)
    p_blur: float = 0.5
    p_flip: float = 0.5

    def __post_init__(self):
        for name in ("p_jitter", "p_grayscale", "p_blur", "p_flip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_area_range must lie in (0, 1], got {self.crop_area_range}")
        lo, hi = self.crop_aspect_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"crop_aspect_range must be positive, got {self.crop_aspect_range}")
        if self.output_scale < 1:
            raise ValueError("output_scale must be >= 1")
        # tuples may arrive as lists from JSON
        for name in ("crop_area_range", "crop_aspect_range", "brightness", "contrast", "saturation", "hue",
                     "blur_radius_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def effective_p_blur(self) -> float:
        # blur is disabled for 32px inputs
        return 0.0 if self.output_scale <= 32 else self.p_blur

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------- geometry

def sample_crop_box(height: int, width: int, cfg: HcaConfig, rng: RngStream) -> tuple[int, int, int, int]:
    """Random-resized-crop box ``(top, left, h, w)``; up to 10 tries then a centre crop."""
    area = height * width
    log_lo, log_hi = math.log(cfg.crop_aspect_range[0]), math.log(cfg.crop_aspect_range[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_area_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # centre crop with the aspect clamped into range
    ratio = width / height
    if ratio < cfg.crop_aspect_range[0]:
        w, h = width, int(round(width / cfg.crop_aspect_range[0]))
    elif ratio > cfg.crop_aspect_range[1]:
        h, w = height, int(round(height * cfg.crop_aspect_range[1]))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


@lru_cache(maxsize=512)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights (half-pixel centres), shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h == size and w == size:
        return image.copy()
    ry, rx = _resize_matrix(h, size), _resize_matrix(w, size)
    rows = (ry @ image.reshape(h, w * 3)).reshape(size, w, 3)
    return np.ascontiguousarray((rows.transpose(0, 2, 1) @ rx.T).transpose(0, 2, 1), dtype=np.float32)


def resized_crop(image: np.ndarray, box: tuple[int, int, int, int], size: int) -> np.ndarray:
    top, left, h, w = box
    return resize(image[top:top + h, left:left + w], size)


# ---------------------------------------------------------------- colour

def grayscale(image: np.ndarray) -> np.ndarray:
    g = image @ GRAY_WEIGHTS
    return np.repeat(g[..., None], 3, axis=2)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    delta = maxc - np.minimum(np.minimum(r, g), b)
    s = delta / np.where(maxc > 0, maxc, 1.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(maxc == r, (g - b) / safe, np.where(maxc == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = h / 6.0
    h = np.where(delta > 0, h - np.floor(h), 0.0)
    return np.stack([h, s, maxc], axis=2)


_HSV_OFFSETS = np.array([5.0, 3.0, 1.0], dtype=np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0:1], hsv[..., 1:2], hsv[..., 2:3]
    k = _HSV_OFFSETS + h * 6.0
    k = k - 6.0 * np.floor(k / 6.0)
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def adjust_brightness(image, factor):
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image, factor):
    mean = float((image @ GRAY_WEIGHTS).mean())
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(image, factor):
    gray = grayscale(image)
    return np.clip(gray + (image - gray) * factor, 0.0, 1.0)


def adjust_hue(image, shift):
    hsv = rgb_to_hsv(image)
    h = hsv[..., 0] + shift
    hsv[..., 0] = h - np.floor(h)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(image: np.ndarray, cfg: HcaConfig, rng: RngStream, trace: dict | None = None) -> np.ndarray:
    """Brightness/contrast/saturation/hue in a random order."""
    params = {
        "brightness": rng.uniform(*cfg.brightness),
        "contrast": rng.uniform(*cfg.contrast),
        "saturation": rng.uniform(*cfg.saturation),
        "hue": rng.uniform(*cfg.hue),
    }
    order = [("brightness", "contrast", "saturation", "hue")[i] for i in rng.permutation(4)]
    ops = {"brightness": adjust_brightness, "contrast": adjust_contrast,
           "saturation": adjust_saturation, "hue": adjust_hue}
    for name in order:
        image = ops[name](image, params[name])
    if trace is not None:
        trace["jitter"] = {"order": order, **{k: float(v) for k, v in params.items()}}
    return image


# ---------------------------------------------------------------- blur

@lru_cache(maxsize=256)
def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 2 sigma, reflect padding."""
    k = _gaussian_kernel(round(float(sigma), 6))
    r = len(k) // 2
    pad = np.pad(image, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = sum(k[i] * pad[i:i + image.shape[0]] for i in range(len(k)))
    pad = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(k[i] * pad[:, i:i + image.shape[1]] for i in range(len(k)))
    return out.astype(np.float32)


# ---------------------------------------------------------------- pipeline

def apply_hca(image: np.ndarray, cfg: HcaConfig, rng: RngStream, trace: dict | None = None) -> np.ndarray:
    """One draw of the handcrafted pipeline.

    Every probability gate consumes exactly one uniform draw whether or not
    the operator fires; operator parameters are drawn only when it fires.
    """
    fired = []
    box = sample_crop_box(image.shape[0], image.shape[1], cfg, rng)
    out = resized_crop(image.astype(np.float32, copy=False), box, cfg.output_scale)
    fired.append("crop")
    if rng.uniform() < cfg.p_jitter:
        out = color_jitter(out, cfg, rng, trace)
        fired.append("jitter")
    if rng.uniform() < cfg.p_grayscale:
        out = grayscale(out)
        fired.append("grayscale")
    if rng.uniform() < cfg.effective_p_blur:
        sigma = rng.uniform(*cfg.blur_radius_range)
        out = gaussian_blur(out, sigma)
        fired.append("blur")
        if trace is not None:
            trace["blur_sigma"] = float(sigma)
    if rng.uniform() < cfg.p_flip:
        out = out[:, ::-1]
        fired.append("flip")
    if trace is not None:
        trace["crop_box"] = box
        trace["fired"] = fired
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)
