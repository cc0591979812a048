"""Dataset-level inference and evaluation used by the CLI and the demos."""

from __future__ import annotations

import logging
import os
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .costvol import build_cost_volume
from .data import (
    DatasetIndex,
    load_image,
    load_mask,
    read_float_map,
    read_scores,
    save_heatmap,
    write_float_map,
    write_scores,
    write_volume,
)
from .encoders import MultiLayerFeatures, TemplatePool, extract_features, sample_templates
from .errors import ConfigError, DatasetError
from .infer import AnomalyDetector, fuse, image_score, normalize_per_category
from .metrics import EvalResult, evaluate_category

log = logging.getLogger(__name__)

CACHE_ENV = "COSTVOL_AD_CACHE"
_STEP_RE = re.compile(r"step_(\d+)$")
_TRAIN_RE = re.compile(r"train_(\d+)$")


class FeatureCache:
    """Optional on-disk cache of template features, keyed by image path and encoder settings.

    Enabled by pointing ``COSTVOL_AD_CACHE`` at a directory.
    """

    def __init__(self, root=None):
        root = root if root is not None else os.environ.get(CACHE_ENV)
        self.root = Path(root) if root else None

    def get(self, key: str, compute):
        if self.root is None:
            return compute()
        path = self.root / (re.sub(r"[^A-Za-z0-9_.-]", "_", key) + ".npy")
        if path.exists():
            return MultiLayerFeatures(np.load(path), source_id=key)
        feats = compute()
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, feats.layers)
        return feats


def load_template_pool(root, category: str, image_size: int) -> TemplatePool:
    """Read ``<root>/<category>/templates/{step_###.png | train_###.png}``."""
    tdir = Path(root) / category / "templates"
    if not tdir.is_dir():
        raise DatasetError(f"no template directory {tdir}")
    pool = TemplatePool()
    for path in sorted(tdir.glob("*.png")):
        size = (image_size, image_size)
        if m := _STEP_RE.match(path.stem):
            pool.reconstructions[int(m.group(1))] = load_image(path, size)
        elif _TRAIN_RE.match(path.stem):
            pool.normals[path.stem] = load_image(path, size)
    return pool


def _map_path(root: Path, category: str, image_id: str) -> Path:
    return root / category / f"{image_id}.fmap"


def infer_dataset(detector: AnomalyDetector, index: DatasetIndex, cfg: RunConfig, out_dir,
                  baseline_dir=None, templates_root=None, dump_volumes: bool = False) -> Path:
    """Score every test image; write fused maps, optional volumes/heatmaps and ``scores.csv``."""
    out_dir = Path(out_dir)
    size = (cfg.run.image_size, cfg.run.image_size)
    lam = cfg.infer.lam
    if baseline_dir is not None and lam == -1.0:
        raise ConfigError("infer.lam must be set when fusing a baseline map")
    cache = FeatureCache()
    enc_key = f"{cfg.encoder.name}-{cfg.encoder.patch}-{cfg.encoder.blur_per_layer}-{cfg.encoder.layers}-{size[0]}"
    rows = []
    for cat_name, cat in index.categories.items():
        if templates_root is not None:
            pool = load_template_pool(templates_root, cat_name, cfg.run.image_size)
            mode = cfg.templates.mode
        else:
            pool = TemplatePool(normals={p.stem: p for p in cat.train})
            mode = "embedding"
        feats_of = {}

        def features(key, value):
            if key not in feats_of:
                image = load_image(value, size) if isinstance(value, Path) else value
                feats_of[key] = cache.get(f"{enc_key}-{cat_name}-{key}", lambda: detector.features(image, str(key)))
            return feats_of[key]

        fused_maps, cat_rows = [], []
        for k, test in enumerate(cat.test):
            image = load_image(test.path, size)
            chosen = sample_templates(mode, "", pool, cfg.templates.N, seed=cfg.run.seed + k, step=k)
            templates = [features(p, t) for t, p in zip(chosen.templates, chosen.provenance)]
            if dump_volumes:
                volume, _ = build_cost_volume(detector.features(image, test.image_id), templates, detector.K)
                write_volume(out_dir / "volumes" / cat_name / f"{test.image_id}.cvol", volume)
            result = detector.predict(image, templates, test.image_id)
            anomaly = result.anomaly
            fused = anomaly
            if baseline_dir is not None:
                fused = fuse(anomaly, read_float_map(_map_path(Path(baseline_dir), cat_name, test.image_id)), lam)
            fused_maps.append(fused)
            write_float_map(_map_path(out_dir / "maps", cat_name, test.image_id), fused)
            cat_rows.append({"image_id": test.image_id, "category": cat_name,
                             "raw_score": image_score(anomaly, cfg.infer.top_k),
                             "fused_score": image_score(fused, cfg.infer.top_k),
                             "label": int(test.is_anomalous)})
        if fused_maps:
            normalized, scores = normalize_per_category(fused_maps, cfg.infer.top_k)
            for row, score, nmap in zip(cat_rows, scores, normalized):
                row["normalized_score"] = score
                if cfg.infer.heatmaps:
                    save_heatmap(out_dir / "heatmaps" / cat_name / f"{row['image_id']}.png", nmap)
        rows.extend(cat_rows)
    write_scores(out_dir / "scores.csv", rows)
    return out_dir / "scores.csv"


def evaluate_run(scores_csv, maps_dir, index: DatasetIndex, fpr_limit: float = 0.3,
                 score_column: str = "fused_score", max_pixels: int | None = 1_000_000) -> dict[str, EvalResult]:
    """Seven metrics per category from a ``scores.csv``, map files and dataset masks.

    Pixel maps are min-max normalized per category first, which leaves every
    ranking metric unchanged.
    """
    rows = read_scores(scores_csv)
    by_cat: dict[str, list[dict]] = {}
    for row in rows:
        by_cat.setdefault(row["category"], []).append(row)
    results = {}
    for cat_name, cat_rows in by_cat.items():
        if cat_name not in index.categories:
            raise DatasetError(f"category {cat_name!r} not found in dataset {index.root}")
        tests = {t.image_id: t for t in index.categories[cat_name].test}
        maps, masks, scores, labels = [], [], [], []
        for row in cat_rows:
            test = tests.get(row["image_id"])
            if test is None:
                raise DatasetError(f"{cat_name}/{row['image_id']} not in dataset")
            amap = read_float_map(_map_path(Path(maps_dir), cat_name, row["image_id"]))
            if test.mask_path is not None:
                mask = load_mask(test.mask_path, amap.shape)
            else:
                mask = np.zeros(amap.shape, np.uint8)
            maps.append(amap)
            masks.append(mask)
            scores.append(row[score_column])
            labels.append(int(test.is_anomalous) if row["label"] is None else row["label"])
        maps, _ = normalize_per_category(maps)
        results[cat_name] = evaluate_category(scores, labels, np.stack(maps), np.stack(masks),
                                              fpr_limit=fpr_limit, max_pixels=max_pixels)
    return results


def score_samples(detector: AnomalyDetector, samples: Sequence, normal_features: dict, N: int, seed: int = 0):
    """Anomaly maps and image scores for in-memory samples against same-category normals."""
    maps, scores = [], []
    for k, s in enumerate(samples):
        pool = TemplatePool(normals=normal_features[s.category])
        chosen = sample_templates("embedding", s.base_id, pool, N, seed=seed + k)
        m = detector.predict(s.image, chosen.templates, s.base_id).anomaly
        maps.append(m)
        scores.append(image_score(m))
    return np.stack(maps), np.array(scores)


def features_for(images: dict, encoder, layers) -> dict[str, MultiLayerFeatures]:
    return {k: extract_features(v, encoder, layers, k) for k, v in images.items()}
