"""Anomaly detection as cost-volume filtering.

Features of an input image are matched globally against a few normal
templates, the matching costs are stacked into a volume, and a small 3D
U-Net learns to filter that volume into a clean anomaly map.
"""

from .config import RunConfig, load_config, parse_config
from .costvol import (
    AnomalyCostVolume,
    build_cost_volume,
    cost_from_similarity,
    initial_anomaly_map,
    merge_and_layout,
    similarity_volume,
    trim_topk,
)
from .encoders import MultiLayerFeatures, build_encoder, extract_features, reconstruct_at_step, sample_templates
from .errors import ConfigError, DatasetError, NumericError, ShapeError, UndefinedMetricError
from .filternet import CostFilterNet, FilterConfig, build_filter
from .infer import AnomalyDetector, fuse, image_score, normalize_per_category
from .losses import LossConfig, total_loss
from .metrics import aupro, auroc, average_precision, evaluate_category, f1max, kde_export
from .synth import SynthParams, build_epoch, synthesize
from .train import Trainer, train

__all__ = [
    "AnomalyCostVolume", "AnomalyDetector", "ConfigError", "CostFilterNet", "DatasetError", "FilterConfig",
    "LossConfig", "MultiLayerFeatures", "NumericError", "RunConfig", "ShapeError", "SynthParams", "Trainer",
    "UndefinedMetricError", "aupro", "auroc", "average_precision", "build_cost_volume", "build_encoder",
    "build_epoch", "build_filter", "cost_from_similarity", "evaluate_category", "extract_features", "f1max",
    "fuse", "image_score", "initial_anomaly_map", "kde_export", "load_config", "merge_and_layout",
    "normalize_per_category", "parse_config", "reconstruct_at_step", "sample_templates", "similarity_volume",
    "synthesize", "total_loss", "train", "trim_topk",
]
