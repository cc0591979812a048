"""Synthetic anomalies for training.

A smooth gradient-noise field is thresholded at a quantile so that the
resulting blob mask covers a sampled fraction of the image, and a foreign
texture is opacity-blended into the normal image inside the mask. Pixels
outside the mask are copied through untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import resize_bilinear
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class SynthParams:
    anomaly_probability: float = 0.5
    min_area: float = 0.01
    max_area: float = 0.2
    opacity: tuple[float, float] = (0.5, 1.0)
    # log2 range of noise lattice cells per side; larger -> more, smaller blobs
    noise_scale: tuple[int, int] = (0, 3)
    max_retries: int = 5

    def __post_init__(self):
        if not (0 < self.min_area <= self.max_area < 1):
            raise ConfigError("need 0 < min_area <= max_area < 1")
        if not (0.0 <= self.anomaly_probability <= 1.0):
            raise ConfigError("anomaly_probability must lie in [0, 1]")
        lo, hi = self.opacity
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("opacity range must satisfy 0 < lo <= hi <= 1")
        self.opacity = (float(lo), float(hi))
        self.noise_scale = (int(self.noise_scale[0]), int(self.noise_scale[1]))


@dataclass
class TrainingSample:
    image: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H, W) uint8
    label: int
    is_anomalous: bool
    base_id: str = ""
    category: str = ""
    diagnostics: list[str] = field(default_factory=list)

    @property
    def area(self) -> float:
        return float(self.mask.mean())


@dataclass
class NormalImage:
    image_id: str
    category: str
    label: int
    image: np.ndarray


def perlin_noise(shape: tuple[int, int], res: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """2-D gradient noise with ``res`` lattice cells per axis, roughly in [-1, 1]."""
    h, w = shape
    ry, rx = res
    gy, gx = int(np.ceil(h / ry)) * ry, int(np.ceil(w / rx)) * rx
    angles = rng.uniform(0, 2 * np.pi, size=(ry + 1, rx + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ys = np.arange(gy) * ry / gy
    xs = np.arange(gx) * rx / gx
    yi, xi = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - yi)[:, None], (xs - xi)[None, :]

    def dot(dy, dx):
        g = grads[yi[:, None] + dy, xi[None, :] + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    def fade(t):
        return 6 * t**5 - 15 * t**4 + 10 * t**3

    uy, ux = fade(fy), fade(fx)
    top = dot(0, 0) * (1 - ux) + dot(0, 1) * ux
    bottom = dot(1, 0) * (1 - ux) + dot(1, 1) * ux
    return (np.sqrt(2) * (top * (1 - uy) + bottom * uy))[:h, :w]


def blob_mask(shape: tuple[int, int], params: SynthParams, rng: np.random.Generator) -> np.ndarray:
    """Top-quantile region of a noise field covering an area drawn from the params."""
    h, w = shape
    total = h * w
    lo, hi = int(np.ceil(params.min_area * total)), int(np.floor(params.max_area * total))
    if lo > hi or hi < 1:
        return np.zeros(shape, dtype=np.uint8)
    sy, sx = rng.integers(params.noise_scale[0], params.noise_scale[1] + 1, size=2)
    noise = perlin_noise(shape, (2**int(sy), 2**int(sx)), rng)
    k = int(np.clip(round(rng.uniform(params.min_area, params.max_area) * total), max(lo, 1), hi))
    order = np.argsort(noise, axis=None, kind="stable")[::-1][:k]
    mask = np.zeros(total, dtype=np.uint8)
    mask[order] = 1
    return mask.reshape(shape)


def _augment_texture(texture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    texture = np.rot90(texture, k=int(rng.integers(4)), axes=(1, 2))
    if rng.random() < 0.5:
        texture = texture[:, :, ::-1]
    return np.ascontiguousarray(texture)


def synthesize(normal, source_texture, params: SynthParams, seed: int, label: int = 0, base_id: str = "", category: str = "") -> TrainingSample:
    """One training sample from a normal image. Deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    normal = np.asarray(normal, dtype=np.float64)
    h, w = normal.shape[-2:]
    sample = TrainingSample(normal.copy(), np.zeros((h, w), np.uint8), label, False, base_id, category)
    if rng.random() >= params.anomaly_probability:
        return sample
    for _ in range(params.max_retries + 1):
        mask = blob_mask((h, w), params, rng)
        if mask.any():
            break
    else:
        msg = f"degenerate mask after {params.max_retries} retries; returning a normal sample"
        log.warning(msg)
        sample.diagnostics.append(msg)
        return sample
    texture = resize_bilinear(np.asarray(source_texture, dtype=np.float64), (h, w))
    texture = _augment_texture(texture, rng)
    beta = rng.uniform(*params.opacity)
    blended = (1 - beta) * normal + beta * texture
    sample.image = np.where(mask[None].astype(bool), blended, normal)
    sample.mask = mask
    sample.is_anomalous = True
    return sample


def build_epoch(pool: Sequence[NormalImage], params: SynthParams, seed: int, num_samples: int | None = None, textures: Sequence[np.ndarray] | None = None) -> list[TrainingSample]:
    """Shuffled samples, anomalous at rate ``params.anomaly_probability``.

    Sample ``k`` uses seed ``seed + k``. Textures default to normal images of
    other categories, or to colour-permuted pool images when the pool holds a
    single category.
    """
    if len(pool) == 0:
        raise ConfigError("normal pool is empty")
    rng = np.random.default_rng(seed)
    n = len(pool) if num_samples is None else num_samples
    bases = [pool[i % len(pool)] for i in rng.permutation(n)]
    categories = {p.category for p in pool}
    samples = []
    for k, base in enumerate(bases):
        srng = np.random.default_rng((seed, k, 1))
        if textures:
            tex = textures[int(srng.integers(len(textures)))]
        elif len(categories) > 1:
            others = [p for p in pool if p.category != base.category]
            tex = others[int(srng.integers(len(others)))].image
        else:
            tex = 1.0 - pool[int(srng.integers(len(pool)))].image[srng.permutation(3)]
        samples.append(synthesize(base.image, tex, params, seed + k, base.label, base.image_id, base.category))
    return samples
