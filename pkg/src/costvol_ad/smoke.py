"""Procedural two-category texture dataset for smoke tests and demos.

``stripes``: warm-coloured sinusoidal stripes with random phase.
``dots``: a lattice of cool-coloured discs with random offset.
Both carry mild pixel noise. Anomalies are synthesized with :mod:`.synth`
using the other category's images as foreign texture.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_image
from .synth import NormalImage, SynthParams, TrainingSample, synthesize

CATEGORIES = ("stripes", "dots")


def stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.5 * yy) / 8.0 + phase)
    colour = np.array([0.85, 0.45, 0.2])[:, None, None]
    img = 0.15 + colour * wave[None]
    return np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)


def dots(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    oy, ox = rng.uniform(0, 10, size=2)
    dy = (yy + oy) % 10 - 5
    dx = (xx + ox) % 10 - 5
    disc = (dy**2 + dx**2 < 9).astype(np.float64)
    base = np.array([0.15, 0.3, 0.35])[:, None, None]
    colour = np.array([0.1, 0.55, 0.6])[:, None, None]
    img = base + colour * disc[None]
    return np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)


GENERATORS = {"stripes": stripes, "dots": dots}


def normal_images(n_per_category: int = 16, size: int = 64, seed: int = 0, prefix: str = "train") -> list[NormalImage]:
    out = []
    for label, cat in enumerate(CATEGORIES):
        rng = np.random.default_rng((seed, label))
        for k in range(n_per_category):
            out.append(NormalImage(f"{prefix}_{k:03d}", cat, label, GENERATORS[cat](size, rng)))
    return out


@dataclass
class SmokeTestSet:
    samples: list[TrainingSample]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.is_anomalous for s in self.samples], dtype=int)


def held_out_set(n_anomalous: int = 32, n_normal: int = 16, size: int = 64, seed: int = 1000) -> SmokeTestSet:
    """Fresh normals (never seen in training) plus synthesized anomalies on fresh normals."""
    per_cat_anom = n_anomalous // len(CATEGORIES)
    per_cat_norm = n_normal // len(CATEGORIES)
    fresh = normal_images(per_cat_anom + per_cat_norm, size, seed, prefix="test")
    params = SynthParams(anomaly_probability=1.0)
    samples = []
    for label, cat in enumerate(CATEGORIES):
        mine = [p for p in fresh if p.category == cat]
        others = [p for p in fresh if p.category != cat]
        for k, base in enumerate(mine):
            if k < per_cat_anom:
                tex = others[k % len(others)].image
                s = synthesize(base.image, tex, params, seed=seed * 7919 + label * 997 + k, label=label,
                               base_id=base.image_id, category=cat)
            else:
                s = TrainingSample(base.image.copy(), np.zeros((size, size), np.uint8), label, False, base.image_id, cat)
            samples.append(s)
    return SmokeTestSet(samples)


def write_dataset(root, n_train: int = 16, size: int = 64, seed: int = 0, test: SmokeTestSet | None = None) -> Path:
    """Write the smoke data in the MVTec-style layout understood by ``scan_dataset``."""
    root = Path(root)
    for img in normal_images(n_train, size, seed):
        save_image(root / img.category / "train" / "good" / f"{img.image_id}.png", img.image)
    test = test if test is not None else held_out_set(size=size)
    for k, s in enumerate(test.samples):
        defect = "texture" if s.is_anomalous else "good"
        stem = f"{k:03d}"
        save_image(root / s.category / "test" / defect / f"{stem}.png", s.image)
        if s.is_anomalous:
            save_image(root / s.category / "ground_truth" / defect / f"{stem}_mask.png", s.mask.astype(float))
    return root
