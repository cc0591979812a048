"""Multi-layer feature extraction and template sources.

Backbones sit behind the :class:`FeatureEncoder` protocol: anything callable
as ``encoder(image, layer_indices) -> list of (C, h, w) arrays``. Two
desk-scale encoders ship here, a patchify stub and a fixed-seed random
convolutional encoder. Layers of differing resolution are resampled
bilinearly to the smallest layer before they are stacked.

Templates come from two places: reconstructions of the input at several
denoising steps (``reconstruct_at_step``) or normal images of the same
category. :func:`sample_templates` draws ``N`` of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, NumericError, ShapeError

TEMPLATE_MODES = ("reconstruction", "embedding", "hybrid")


def resize_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the last two axes of ``grid`` to ``size``.

    Uses half-pixel centers (``align_corners=False``). Returns the input
    unchanged when it already has the requested size.
    """
    grid = np.asarray(grid)
    if tuple(grid.shape[-2:]) == tuple(size):
        return grid
    lead = grid.shape[:-2]
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float64)).reshape(1, -1, *grid.shape[-2:])
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size).numpy().astype(grid.dtype if grid.dtype.kind == "f" else np.float64)


@dataclass
class MultiLayerFeatures:
    """``L`` stacked feature grids of one image, shape ``(L, C, H', W')``."""

    layers: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 4 or self.layers.shape[0] < 1:
            raise ShapeError(f"expected (L, C, H', W') features, got shape {self.layers.shape}")
        if not np.all(np.isfinite(self.layers)):
            raise NumericError(f"non-finite activations in features of {self.source_id!r}")

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def channels(self) -> int:
        return self.layers.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.layers.shape[2], self.layers.shape[3]


class FeatureEncoder(Protocol):
    def __call__(self, image: np.ndarray, layer_indices: Sequence[int]) -> list[np.ndarray]: ...


class IdentityEncoder:
    """Copies the image into every requested layer (``C = 3``)."""

    name = "identity"

    def __call__(self, image, layer_indices):
        image = np.asarray(image, dtype=np.float64)
        return [image.copy() for _ in layer_indices]


class PatchifyEncoder:
    """Non-overlapping ``patch x patch`` pixel patches flattened into channels.

    Layer ``k`` patchifies the image after a Gaussian blur of width
    ``k * blur_per_layer`` pixels, so deeper layers carry coarser context.
    ``offset`` is subtracted first to keep cosine similarity informative for
    images whose pixels are all positive.
    """

    name = "patchify"

    def __init__(self, patch: int = 4, blur_per_layer: float = 1.0, offset: float = 0.5):
        if patch < 1:
            raise ConfigError("patch must be >= 1")
        self.patch = patch
        self.blur_per_layer = blur_per_layer
        self.offset = offset

    def __call__(self, image, layer_indices):
        image = np.asarray(image, dtype=np.float64) - self.offset
        c, h, w = image.shape
        p = self.patch
        hp, wp = h // p, w // p
        out = []
        for k in layer_indices:
            sigma = k * self.blur_per_layer
            img = ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect") if sigma > 0 else image
            img = img[:, : hp * p, : wp * p]
            patches = img.reshape(c, hp, p, wp, p).transpose(0, 2, 4, 1, 3).reshape(c * p * p, hp, wp)
            out.append(patches)
        return out


class RandomConvEncoder:
    """Untrained convolutional encoder with fixed-seed weights.

    Each stage is a stride-2 3x3 convolution followed by ReLU; stage ``k``
    output is layer ``k``. All stages emit ``channels`` maps, so the only
    mismatch between layers is spatial and is resolved by resampling.
    """

    name = "random_conv"

    def __init__(self, channels: int = 16, num_stages: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.weights = []
        in_ch = 3
        for _ in range(num_stages):
            fan_in = in_ch * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(channels, in_ch, 3, 3))
            self.weights.append(torch.from_numpy(w))
            in_ch = channels

    def __call__(self, image, layer_indices):
        if max(layer_indices) >= len(self.weights):
            raise ConfigError(f"layer index {max(layer_indices)} exceeds {len(self.weights)} stages")
        x = torch.from_numpy(np.asarray(image, dtype=np.float64))[None]
        stages = []
        with torch.no_grad():
            for w in self.weights:
                x = F.relu(F.conv2d(x, w, stride=2, padding=1))
                stages.append(x[0].numpy())
        return [stages[k] for k in layer_indices]


ENCODERS: dict[str, Callable[..., FeatureEncoder]] = {
    "identity": IdentityEncoder,
    "patchify": PatchifyEncoder,
    "random_conv": RandomConvEncoder,
}


def build_encoder(name: str, **kwargs) -> FeatureEncoder:
    try:
        factory = ENCODERS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder {name!r}; choose from {sorted(ENCODERS)}") from None
    return factory(**kwargs)


def extract_features(image, encoder: FeatureEncoder, layer_indices: Sequence[int], source_id: str = "") -> MultiLayerFeatures:
    """Run ``encoder`` and stack its layers on a common grid.

    Layers are resampled to the smallest layer's spatial size. The result is
    a pure function of the encoder and the image.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a (3, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise NumericError(f"non-finite pixels in image {source_id!r}")
    if len(layer_indices) < 1:
        raise ConfigError("at least one layer index is required")
    layers = encoder(image, list(layer_indices))
    if len(layers) != len(layer_indices):
        raise ShapeError(f"encoder returned {len(layers)} layers, expected {len(layer_indices)}")
    target = min((layer.shape[-2:] for layer in layers), key=lambda s: s[0] * s[1])
    layers = [resize_bilinear(layer, target) for layer in layers]
    shapes = {layer.shape for layer in layers}
    if len(shapes) != 1:
        raise ShapeError(f"layer shapes disagree after resampling: {sorted(shapes)}")
    return MultiLayerFeatures(np.stack(layers).astype(np.float64), source_id=source_id)


# --- diffusion-style reconstruction templates -------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal rates ``alpha_bar[t]`` for steps ``t = 0..max_step``."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ConfigError("alpha_bar must be a non-empty 1-D sequence")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ConfigError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ConfigError("alpha_bar must be non-increasing in t")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def max_step(self) -> int:
        return self.alpha_bar.size - 1

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])

    @classmethod
    def linear(cls, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, num_steps)
        return cls(np.cumprod(1.0 - betas))


NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


def reconstruct_at_step(image_t, t: int, eps: NoisePredictor, sched: DiffusionSchedule | Mapping[int, float]) -> np.ndarray:
    """One-shot estimate of the clean image from the noisy image at step ``t``.

    ``(I_t - sqrt(1 - abar_t) * eps(I_t, t)) / sqrt(abar_t)``, elementwise.
    """
    if isinstance(sched, DiffusionSchedule) and t > sched.max_step:
        raise ConfigError(f"step {t} exceeds schedule max_step {sched.max_step}")
    abar = float(sched[t])
    if abar == 0.0:
        raise ZeroDivisionError(f"alpha_bar at step {t} is zero")
    image_t = np.asarray(image_t, dtype=np.float64)
    noise = np.asarray(eps(image_t, t), dtype=np.float64)
    if not np.all(np.isfinite(noise)):
        raise NumericError(f"noise predictor returned non-finite values at step {t}")
    return (image_t - np.sqrt(1.0 - abar) * noise) / np.sqrt(abar)


def zero_noise(image_t, t):
    return np.zeros_like(image_t)


def identity_noise(image_t, t):
    return np.array(image_t, copy=True)


class ReferenceNoisePredictor:
    """Predicts the noise that maps ``I_t`` back onto a known normal image.

    Stands in for a frozen, well-trained denoiser at desk scale. The target at
    step ``t`` is the reference blurred by ``blur_per_step * t`` pixels, so
    early (noisier) steps keep only low-frequency content.
    """

    def __init__(self, reference, sched: DiffusionSchedule, blur_per_step: float = 0.0):
        self.reference = np.asarray(reference, dtype=np.float64)
        self.sched = sched
        self.blur_per_step = blur_per_step

    def target(self, t: int) -> np.ndarray:
        sigma = self.blur_per_step * t
        if sigma <= 0:
            return self.reference
        return ndimage.gaussian_filter(self.reference, sigma=(0, sigma, sigma), mode="reflect")

    def __call__(self, image_t, t):
        abar = self.sched[t]
        if abar >= 1.0:
            return np.zeros_like(image_t)
        return (image_t - np.sqrt(abar) * self.target(t)) / np.sqrt(1.0 - abar)


def noise_image(image, t: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Forward-diffuse ``image`` to step ``t``."""
    abar = sched[t]
    z = rng.standard_normal(np.shape(image))
    return np.sqrt(abar) * np.asarray(image, dtype=np.float64) + np.sqrt(1.0 - abar) * z


def reconstruction_pool(image, eps: NoisePredictor, sched: DiffusionSchedule, steps: Sequence[int], seed: int = 0) -> dict[int, np.ndarray]:
    """Reconstructions of ``image`` at each of ``steps``, keyed by step."""
    rng = np.random.default_rng(seed)
    return {int(t): reconstruct_at_step(noise_image(image, t, sched, rng), t, eps, sched) for t in steps}


# --- template sampling ------------------------------------------------------------------


@dataclass
class TemplatePool:
    """Candidate templates for one input.

    ``reconstructions`` maps denoising step to image (or features); the
    final step is the smallest key. ``normals`` maps training image id to
    image (or features) of the input's category.
    """

    reconstructions: dict[int, object] = field(default_factory=dict)
    normals: dict[str, object] = field(default_factory=dict)


@dataclass
class TemplateSet:
    templates: list
    mode: str
    provenance: list

    def __len__(self):
        return len(self.templates)


def _source_for(mode: str, rng: np.random.Generator, step: int | None) -> str:
    if mode != "hybrid":
        return mode
    if step is not None:
        return "reconstruction" if step % 2 == 0 else "embedding"
    return "reconstruction" if rng.random() < 0.5 else "embedding"


def sample_templates(mode: str, input_id: str, pool: TemplatePool, N: int, seed: int, step: int | None = None) -> TemplateSet:
    """Draw ``N`` templates for ``input_id``.

    Reconstruction mode always includes the final step and fills the rest
    uniformly without replacement from the other steps. Embedding mode draws
    uniformly without replacement from same-category normals other than the
    input itself. Hybrid mode picks one source per call: by parity of
    ``step`` when given (even: reconstruction), otherwise by a seeded coin.
    """
    if mode not in TEMPLATE_MODES:
        raise ConfigError(f"unknown template mode {mode!r}")
    if N < 1:
        raise ConfigError("N must be >= 1")
    rng = np.random.default_rng(seed)
    source = _source_for(mode, rng, step)
    if source == "reconstruction":
        steps = sorted(pool.reconstructions)
        if len(steps) < N:
            raise ConfigError(f"reconstruction pool has {len(steps)} steps, need {N}")
        final, rest = steps[0], steps[1:]
        extra = rng.choice(len(rest), size=N - 1, replace=False) if N > 1 else []
        chosen = [final] + [rest[i] for i in sorted(extra)]
        return TemplateSet([pool.reconstructions[t] for t in chosen], source, [f"step_{t:03d}" for t in chosen])
    ids = sorted(k for k in pool.normals if k != input_id)
    if len(ids) < N:
        raise ConfigError(f"embedding pool has {len(ids)} candidates besides {input_id!r}, need {N}")
    picks = rng.choice(len(ids), size=N, replace=False)
    chosen = [ids[i] for i in picks]
    return TemplateSet([pool.normals[k] for k in chosen], source, list(chosen))
