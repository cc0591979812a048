"""Inference-time scoring: map fusion, image scores and per-category normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .costvol import build_cost_volume
from .encoders import FeatureEncoder, MultiLayerFeatures, extract_features, resize_bilinear
from .errors import ConfigError
from .filternet import CostFilterNet, upsample_probs

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 250


@dataclass
class AnomalyScoreMap:
    probs: np.ndarray  # (2, H, W)

    @property
    def anomaly(self) -> np.ndarray:
        return self.probs[1]

    @property
    def image_score(self) -> float:
        return image_score(self.anomaly)


def fuse(anomaly_map, baseline_map, lam: float) -> np.ndarray:
    """``lam * map + (1 - lam) * baseline``; the baseline is resized bilinearly if needed.

    The endpoints return a copy of one input unchanged.
    """
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    m = np.asarray(anomaly_map)
    b = np.asarray(baseline_map)
    if b.shape != m.shape:
        b = resize_bilinear(b, m.shape[-2:])
    if lam == 1.0:
        return m.copy()
    if lam == 0.0:
        return b.copy()
    return lam * m + (1.0 - lam) * b


def image_score(anomaly_map, top_k: int = DEFAULT_TOP_K) -> float:
    """Mean of the ``top_k`` largest values (all values when the map is smaller)."""
    flat = np.asarray(anomaly_map, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty anomaly map")
    if flat.size <= top_k:
        return float(flat.mean())
    return float(np.partition(flat, flat.size - top_k)[-top_k:].mean())


def normalize_per_category(maps: Sequence[np.ndarray], top_k: int = DEFAULT_TOP_K):
    """Min-max normalize every map with the category's global pixel min/max.

    Returns ``(normalized_maps, image_scores)``. A degenerate pool
    (max == min) maps to zeros.
    """
    if len(maps) == 0:
        raise ValueError("no maps to normalize")
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    lo = min(a.min() for a in arrs)
    hi = max(a.max() for a in arrs)
    if hi == lo:
        log.warning("normalize_per_category: constant maps (value %g); mapping to zeros", lo)
        out = [np.zeros_like(a) for a in arrs]
    else:
        out = [(a - lo) / (hi - lo) for a in arrs]
    return out, [image_score(a, top_k) for a in out]


def batch_tensors(items: Sequence[tuple], dtype=torch.float32):
    """Stack ``(volume, initial_map, features)`` numpy triples into batch tensors."""
    vols, maps, feats = zip(*items)
    return (
        torch.from_numpy(np.stack(vols)).to(dtype),
        torch.from_numpy(np.stack(maps)).to(dtype),
        torch.from_numpy(np.stack(feats)).to(dtype),
    )


class AnomalyDetector:
    """Encoder + cost volume + trained filter, for one image at a time."""

    def __init__(self, model: CostFilterNet, encoder: FeatureEncoder, layer_indices: Sequence[int], K: int | None):
        self.model = model.eval()
        self.encoder = encoder
        self.layer_indices = list(layer_indices)
        self.K = K

    def features(self, image, source_id: str = "") -> MultiLayerFeatures:
        return extract_features(image, self.encoder, self.layer_indices, source_id)

    def prepare(self, image, templates: Sequence[MultiLayerFeatures], source_id: str = ""):
        f_S = self.features(image, source_id)
        volume, mbar = build_cost_volume(f_S, templates, self.K)
        return volume, mbar, f_S

    @torch.no_grad()
    def predict(self, image, templates: Sequence[MultiLayerFeatures], source_id: str = "") -> AnomalyScoreMap:
        volume, mbar, f_S = self.prepare(image, templates, source_id)
        vol, m, f = batch_tensors([(volume.values, mbar, f_S.layers)])
        out = self.model(vol, m, f)
        probs = upsample_probs(out.probs, tuple(np.shape(image)[-2:]))
        return AnomalyScoreMap(probs[0].double().numpy())
