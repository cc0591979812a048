"""Image- and pixel-level evaluation metrics and KDE curve export.

All curve metrics use the distinct score values as thresholds, with a sample
counted as positive when ``score >= threshold``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, stats

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
METRIC_NAMES = ("i_auroc", "i_ap", "i_f1max", "p_auroc", "p_ap", "p_f1max", "p_aupro")


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(positive outranks negative), ties count 1/2."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _threshold_counts(scores, labels):
    """True/false positive counts at each distinct threshold, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp, s[last]


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum of (R_k - R_{k-1}) * P_k over thresholds."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    tp, fp, _ = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1max(scores, labels) -> float:
    """Maximum F1 over all distinct-score thresholds."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1max needs at least one positive")
    tp, fp, _ = _threshold_counts(scores, labels)
    f1 = 2 * tp / (tp + fp + n_pos)
    return float(f1.max())


def pro_curve(anomaly_maps, gt_masks):
    """FPR and mean per-region overlap at every distinct threshold.

    Regions are 8-connected components of each ground-truth mask. The curve
    starts at ``(0, 0)`` (threshold above every score).
    """
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    masks = np.asarray(gt_masks).astype(bool)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if maps.shape != masks.shape:
        raise ValueError(f"maps {maps.shape} vs masks {masks.shape}")
    region_ids = np.zeros(masks.shape, dtype=np.int64)
    n_regions = 0
    for b in range(masks.shape[0]):
        lab, n = ndimage.label(masks[b], structure=EIGHT_CONNECTED)
        region_ids[b] = np.where(lab > 0, lab + n_regions, 0)
        n_regions += n
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    n_neg = int((~masks).sum())
    if n_neg == 0:
        raise UndefinedMetricError("AUPRO needs at least one normal pixel")
    region_sizes = np.bincount(region_ids.ravel(), minlength=n_regions + 1)
    flat_ids = region_ids.ravel()
    # per-pixel increments: FPR for normal pixels, region overlap share for anomalous ones
    fpr_inc = (flat_ids == 0) / n_neg
    pro_inc = np.where(flat_ids > 0, 1.0 / (region_sizes[flat_ids] * n_regions), 0.0)
    scores = maps.ravel()
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    fpr = np.cumsum(fpr_inc[order])[last]
    pro = np.cumsum(pro_inc[order])[last]
    return np.r_[0.0, fpr], np.r_[0.0, pro], s[last]


def integrate_curve(x, y, limit: float, mode: str = "step") -> float:
    """Area under ``y(x)`` on ``[0, limit]`` divided by ``limit``.

    ``step`` holds each ``y`` until the next point (the value reached at the
    largest threshold whose ``x <= t``); ``trapezoid`` interpolates linearly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mode == "step":
        edges = np.clip(np.r_[x, np.inf], 0.0, limit)
        return float(np.sum(y * np.diff(edges)) / limit)
    if mode == "trapezoid":
        keep = x <= limit
        xs, ys = x[keep], y[keep]
        if xs[-1] < limit and keep.size > keep.sum():
            y_lim = np.interp(limit, x, y)
            xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
        return float(np.trapezoid(ys, xs) / limit)
    raise ValueError(f"unknown integration mode {mode!r}")


def aupro(anomaly_maps, gt_masks, fpr_limit: float = 0.3, mode: str = "step") -> float:
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``."""
    fpr, pro, _ = pro_curve(anomaly_maps, gt_masks)
    return integrate_curve(fpr, pro, fpr_limit, mode)


def kde_export(scores, labels, grid_points: int = 512, weights=None, pad_bandwidths: float = 3.0) -> dict:
    """Gaussian KDE per class (Scott bandwidth) on a shared grid.

    The grid spans the pooled score range widened by ``pad_bandwidths``
    kernel widths on each side so the tails integrate. Classes with fewer
    than two points are skipped.
    """
    scores, labels = _prepare(scores, labels)
    w = None if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    kdes = {}
    for name, sel in (("normal", ~labels), ("anomalous", labels)):
        pts = scores[sel]
        if pts.size < 2 or np.ptp(pts) == 0:
            log.warning("kde_export: skipping class %r with %d distinct-spread points", name, pts.size)
            continue
        kdes[name] = stats.gaussian_kde(pts, bw_method="scott", weights=None if w is None else w[sel])
    pad = max((np.sqrt(k.covariance[0, 0]) for k in kdes.values()), default=0.0) * pad_bandwidths
    grid = np.linspace(scores.min() - pad, scores.max() + pad, grid_points)
    table = {"grid": grid}
    for name, kde in kdes.items():
        table[name] = kde(grid)
    return table


@dataclass
class EvalResult:
    i_auroc: float
    i_ap: float
    i_f1max: float
    p_auroc: float
    p_ap: float
    p_f1max: float
    p_aupro: float

    def as_dict(self) -> dict:
        return asdict(self)


def subsample_pixels(scores, labels, max_pixels: int | None, seed: int = 0):
    scores, labels = _prepare(scores, labels)
    if max_pixels is None or scores.size <= max_pixels:
        return scores, labels
    idx = np.random.default_rng(seed).choice(scores.size, size=max_pixels, replace=False)
    return scores[idx], labels[idx]


def evaluate_category(image_scores, image_labels, maps, masks, fpr_limit: float = 0.3,
                      max_pixels: int | None = 1_000_000, seed: int = 0) -> EvalResult:
    """All seven metrics for one category. ``max_pixels=None`` is exact mode."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    px_s, px_l = subsample_pixels(maps, masks, max_pixels, seed)
    return EvalResult(
        i_auroc=auroc(image_scores, image_labels),
        i_ap=average_precision(image_scores, image_labels),
        i_f1max=f1max(image_scores, image_labels),
        p_auroc=auroc(px_s, px_l),
        p_ap=average_precision(px_s, px_l),
        p_f1max=f1max(px_s, px_l),
        p_aupro=aupro(maps, masks, fpr_limit),
    )


def mean_result(results: dict[str, EvalResult]) -> EvalResult:
    return EvalResult(**{k: float(np.mean([getattr(r, k) for r in results.values()])) for k in METRIC_NAMES})


def format_table(results: dict[str, EvalResult]) -> str:
    """Per-category rows plus a mean row, metrics in percent."""
    header = ["category", "I-AUROC", "I-AP", "I-F1max", "P-AUROC", "P-AP", "P-F1max", "P-AUPRO"]
    rows = dict(results)
    if len(results) > 1:
        rows["mean"] = mean_result(results)
    width = max(len(header[0]), *(len(k) for k in rows))
    lines = [f"{header[0]:<{width}} " + " ".join(f"{h:>8}" for h in header[1:])]
    for name, r in rows.items():
        lines.append(f"{name:<{width}} " + " ".join(f"{100 * getattr(r, m):8.1f}" for m in METRIC_NAMES))
    return "\n".join(lines)
