"""Anomaly cost volume construction.

The input's feature at every spatial index is compared, by cosine
similarity, against the feature at *every* spatial index of every template
(global matching). Costs are ``1 - similarity``. The template axis ``n`` and
the template-location axis ``j`` are merged into one matching axis with
``m = n * D + j`` where ``D = H' * W'``.

Array layouts:

* similarity / pre-merge cost: ``(D, N, L, D)`` indexed ``(j, n, l, i)``
* merged cost volume: ``(M, L, H', W')`` with ``M = D * N`` (or ``K`` once trimmed)
* initial anomaly map: ``(L, H', W')``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import MultiLayerFeatures
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
# cosines this close to +-1 are rounded onto the bound so exact matches cost exactly 0
_SNAP = 8 * np.finfo(np.float64).eps


@dataclass
class SimilarityVolume:
    values: np.ndarray
    grid_shape: tuple[int, int]
    zero_norm_vectors: int = 0

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def L(self) -> int:
        return self.values.shape[2]


@dataclass
class PreMergeCost:
    """Cost volume before the ``(n, j)`` merge, indexed ``(j, n, l, i)``."""

    values: np.ndarray
    grid_shape: tuple[int, int]


@dataclass
class AnomalyCostVolume:
    values: np.ndarray
    D: int
    N: int
    trimmed: bool = False
    K: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


def _unit_vectors(layers: np.ndarray) -> tuple[np.ndarray, int]:
    """``(L, C, H, W)`` -> unit vectors ``(L, D, C)`` plus the count of zero-norm vectors."""
    L, C, H, W = layers.shape
    flat = layers.reshape(L, C, H * W).transpose(0, 2, 1)
    norms = np.linalg.norm(flat, axis=-1, keepdims=True)
    zero = norms == 0
    n_zero = int(zero.sum())
    if n_zero:
        norms = np.where(zero, NORM_EPS, norms)
    return flat / norms, n_zero


def similarity_volume(f_S: MultiLayerFeatures, f_T: Sequence[MultiLayerFeatures]) -> SimilarityVolume:
    """Cosine similarity of every input location against every template location.

    Returns values indexed ``(j, n, l, i)``: template location ``j`` of
    template ``n`` at layer ``l`` against input location ``i``.
    """
    if len(f_T) < 1:
        raise ConfigError("at least one template is required")
    shape = f_S.layers.shape
    for k, t in enumerate(f_T):
        if t.layers.shape != shape:
            raise ShapeError(f"template {k} has shape {t.layers.shape}, input has {shape}")
    u, zero = _unit_vectors(f_S.layers)
    L, D, _ = u.shape
    out = np.empty((D, len(f_T), L, D))
    for n, t in enumerate(f_T):
        w, z = _unit_vectors(t.layers)
        zero += z
        # (L, Dj, C) @ (L, C, Di) -> (L, Dj, Di)
        out[:, n] = (w @ u.transpose(0, 2, 1)).transpose(1, 0, 2)
    np.clip(out, -1.0, 1.0, out=out)
    out[out >= 1.0 - _SNAP] = 1.0
    out[out <= -1.0 + _SNAP] = -1.0
    if zero:
        log.warning("similarity_volume: %d zero-norm feature vectors guarded with eps=%g", zero, NORM_EPS)
    return SimilarityVolume(out, f_S.grid_shape, zero_norm_vectors=zero)


def cost_from_similarity(V: SimilarityVolume) -> PreMergeCost:
    """Matching cost ``1 - V``; larger means more likely anomalous."""
    return PreMergeCost(np.clip(1.0 - V.values, 0.0, 2.0), V.grid_shape)


def merge_and_layout(C: PreMergeCost) -> AnomalyCostVolume:
    """Merge ``(n, j)`` into one matching axis and unfold ``H'W'`` into ``H' x W'``."""
    D, N, L, Di = C.values.shape
    H, W = C.grid_shape
    if Di != H * W:
        raise ShapeError(f"spatial length {Di} does not match grid {H}x{W}")
    merged = C.values.transpose(1, 0, 2, 3).reshape(N * D, L, H, W)
    return AnomalyCostVolume(np.ascontiguousarray(merged), D=D, N=N)


def merged_index(n: int, j: int, D: int) -> int:
    return n * D + j


def unmerge_index(m: int, D: int) -> tuple[int, int]:
    """Inverse of :func:`merged_index`: ``m -> (n, j)``."""
    return divmod(m, D)


def unmerge(volume: AnomalyCostVolume) -> PreMergeCost:
    """Inverse of :func:`merge_and_layout` for untrimmed volumes."""
    if volume.trimmed:
        raise ConfigError("a trimmed volume cannot be unmerged")
    M, L, H, W = volume.values.shape
    vals = volume.values.reshape(volume.N, volume.D, L, H * W).transpose(1, 0, 2, 3)
    return PreMergeCost(np.ascontiguousarray(vals), (H, W))


def trim_topk(C: AnomalyCostVolume, K: int) -> AnomalyCostVolume:
    """Keep the ``K`` smallest costs of every ``(l, y, x)`` column, ascending."""
    if K <= 0:
        raise ConfigError(f"K must be positive, got {K}")
    M = C.num_channels
    if K > M:
        raise ConfigError(f"K={K} exceeds the {M} available matching channels")
    vals = C.values
    if K < M:
        vals = np.partition(vals, K - 1, axis=0)[:K]
    vals = np.sort(vals, axis=0)
    return AnomalyCostVolume(vals, D=C.D, N=C.N, trimmed=True, K=K, diagnostics=dict(C.diagnostics))


def default_K(D: int, N: int) -> int:
    """``D * N`` for a single template, otherwise ``D``."""
    return D * N if N == 1 else D


def initial_anomaly_map(C: AnomalyCostVolume) -> np.ndarray:
    """Min over the matching axis: ``(L, H', W')``."""
    return C.values.min(axis=0)


def build_cost_volume(f_S: MultiLayerFeatures, f_T: Sequence[MultiLayerFeatures], K: int | None = None) -> tuple[AnomalyCostVolume, np.ndarray]:
    """Full construction: similarity, cost, merge, trim and initial map.

    ``K=None`` applies :func:`default_K`; ``K=0`` disables trimming.
    """
    V = similarity_volume(f_S, f_T)
    vol = merge_and_layout(cost_from_similarity(V))
    vol.diagnostics["zero_norm_vectors"] = V.zero_norm_vectors
    if K is None:
        K = default_K(vol.D, vol.N)
    if K:
        vol = trim_topk(vol, min(K, vol.num_channels))
    return vol, initial_anomaly_map(vol)


def dump_volume(volume: AnomalyCostVolume, path) -> None:
    from .data import write_volume

    write_volume(path, volume)


def load_volume(path) -> AnomalyCostVolume:
    from .data import read_volume

    return read_volume(path)
