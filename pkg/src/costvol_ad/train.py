"""Training loop: synthesis -> features -> cost volume -> filter -> loss.

A run directory holds ``config.echo`` (the resolved configuration),
``log.jsonl`` (one loss record per step) and ``ckpt/epoch_NNN.ckpt`` plus
``ckpt/best.ckpt``.

Checkpoint files start with the 8-byte magic ``CVADCKPT`` and a
little-endian u32 format version, followed by a ``torch.save`` payload with
keys ``config`` (echo text), ``filter_config``, ``categories``, ``model``
(name -> float32 tensor), ``optimizer``, ``scheduler``, ``epoch``,
``batch``, ``step``, ``best_loss`` and ``torch_rng``.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, format_config
from .costvol import build_cost_volume
from .data import DatasetIndex, load_image
from .encoders import (
    DiffusionSchedule,
    MultiLayerFeatures,
    ReferenceNoisePredictor,
    TemplatePool,
    build_encoder,
    extract_features,
    reconstruction_pool,
    sample_templates,
)
from .errors import ConfigError, DatasetError, NumericError
from .filternet import CostFilterNet, FilterConfig, build_filter, upsample_probs
from .infer import batch_tensors
from .losses import LossBreakdown, LossConfig, total_loss
from .synth import NormalImage, SynthParams, TrainingSample, build_epoch

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CVADCKPT"
CKPT_VERSION = 1


# --- config plumbing --------------------------------------------------------------------


def encoder_from_config(cfg: RunConfig):
    e = cfg.encoder
    if e.name == "patchify":
        return build_encoder("patchify", patch=e.patch, blur_per_layer=e.blur_per_layer)
    if e.name == "random_conv":
        return build_encoder("random_conv", channels=e.channels, num_stages=e.stages, seed=e.seed)
    return build_encoder(e.name)


def synth_params_from_config(cfg: RunConfig) -> SynthParams:
    s = cfg.synth
    return SynthParams(s.anomaly_probability, s.min_area, s.max_area, (s.opacity_min, s.opacity_max),
                       (s.noise_scale_min, s.noise_scale_max), s.max_retries)


def loss_config_from_config(cfg: RunConfig) -> LossConfig:
    s = cfg.loss
    return LossConfig(s.alpha, s.gamma0, s.focal, s.ce, s.soft_iou, s.ssim)


def resolve_K(cfg: RunConfig, D: int) -> int:
    """Matching channels fed to the filter."""
    N, K = cfg.templates.N, cfg.templates.K
    if K == 0:
        return D * N
    if K < 0:
        return D * N if N == 1 else D
    return min(K, D * N)


def filter_config_for(cfg: RunConfig, K: int, depth: int, feature_channels: int, num_classes: int) -> FilterConfig:
    f = cfg.filter
    return FilterConfig(K=K, depth=depth, feature_channels=feature_channels, num_classes=num_classes,
                        base_channels=f.base_channels, num_scales=f.num_scales, guidance_sg=f.guidance_sg,
                        guidance_mg=f.guidance_mg, dn_mapping=f.dn_mapping, guidance_channels=f.guidance_channels,
                        reduction=f.reduction, spatial_kernel=f.spatial_kernel, head_kernel=f.head_kernel,
                        volume_residual=f.volume_residual, seed=cfg.run.seed)


def load_train_pool(index: DatasetIndex, image_size: int) -> list[NormalImage]:
    pool = []
    for label, (name, cat) in enumerate(index.categories.items()):
        if not cat.train:
            raise DatasetError(f"category {name!r} has no train/good images")
        for path in cat.train:
            pool.append(NormalImage(path.stem, name, label, load_image(path, (image_size, image_size))))
    if not pool:
        raise DatasetError(f"no training images under {index.root}")
    return pool


# --- checkpoints ------------------------------------------------------------------------


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return torch.load(io.BytesIO(fh.read()), weights_only=False)


def model_from_checkpoint(path) -> tuple[CostFilterNet, dict]:
    payload = load_checkpoint(path)
    model = build_filter(FilterConfig(**payload["filter_config"]))
    model.load_state_dict(payload["model"])
    return model, payload


# --- training ---------------------------------------------------------------------------


@dataclass
class StepResult:
    losses: dict
    gammas: np.ndarray
    class_logits: np.ndarray
    labels: np.ndarray
    template_mode: str
    grad_norm: float
    lr: float


@dataclass
class PreparedSample:
    volume: np.ndarray
    initial_map: np.ndarray
    features: np.ndarray
    mask: np.ndarray
    label: int
    template_mode: str
    provenance: list = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer and scheduler for one run."""

    def __init__(self, cfg: RunConfig, pool: Sequence[NormalImage], run_dir=None):
        self.cfg = cfg.validate()
        if not pool:
            raise ConfigError("training pool is empty")
        self.pool = list(pool)
        self.categories = sorted({p.category for p in self.pool}, key=lambda c: min(p.label for p in self.pool if p.category == c))
        self.run_dir = Path(run_dir if run_dir is not None else cfg.run.output_dir)
        if cfg.run.deterministic:
            torch.use_deterministic_algorithms(True)
        self.encoder = encoder_from_config(cfg)
        self.layers = list(cfg.encoder.layers)
        self.synth = synth_params_from_config(cfg)
        self.loss_cfg = loss_config_from_config(cfg)
        self.schedule = DiffusionSchedule.linear(max(cfg.templates.steps, 2) * 40)
        self.recon_steps = [k * 40 for k in range(cfg.templates.steps)]
        self.normal_features: dict[str, dict[str, MultiLayerFeatures]] = {}
        self.normal_images = {(p.category, p.image_id): p.image for p in self.pool}
        for p in self.pool:
            self.normal_features.setdefault(p.category, {})[p.image_id] = extract_features(p.image, self.encoder, self.layers, p.image_id)
        probe = next(iter(next(iter(self.normal_features.values())).values()))
        L, C, H, W = probe.layers.shape
        self.K = resolve_K(cfg, H * W)
        self.filter_cfg = filter_config_for(cfg, self.K, L, C, len(self.categories))
        self.model = build_filter(self.filter_cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.trainer.lr, betas=(0.9, 0.999), eps=1e-8)
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="min", factor=cfg.trainer.factor, patience=cfg.trainer.patience,
            threshold=cfg.trainer.threshold, threshold_mode="rel")
        self.epoch = 0
        self.batch = 0
        self.step = 0
        self.best_loss = float("inf")
        self.history: list[dict] = []
        torch.manual_seed(cfg.run.seed)

    # templates and volumes

    def template_seed(self, epoch: int, index: int) -> int:
        return (self.cfg.run.seed * 1_000_003 + epoch * 10_007 + index) % (2**32)

    def _reconstruction_templates(self, sample: TrainingSample, seed: int) -> dict[int, np.ndarray]:
        reference = self.normal_images[(sample.category, sample.base_id)]
        eps = ReferenceNoisePredictor(reference, self.schedule, self.cfg.templates.blur_per_step / 40)
        return reconstruction_pool(sample.image, eps, self.schedule, self.recon_steps, seed)

    def prepare(self, sample: TrainingSample, seed: int, step: int | None = None) -> PreparedSample:
        mode = self.cfg.templates.mode
        pool = TemplatePool(normals=self.normal_features[sample.category])
        source = mode
        if mode == "hybrid":
            source = "reconstruction" if (step if step is not None else 0) % 2 == 0 else "embedding"
        if source == "reconstruction":
            pool.reconstructions = self._reconstruction_templates(sample, seed)
        chosen = sample_templates(source, sample.base_id, pool, self.cfg.templates.N, seed)
        templates = [t if isinstance(t, MultiLayerFeatures) else extract_features(t, self.encoder, self.layers, p)
                     for t, p in zip(chosen.templates, chosen.provenance)]
        f_S = extract_features(sample.image, self.encoder, self.layers, sample.base_id)
        volume, mbar = build_cost_volume(f_S, templates, self.K)
        return PreparedSample(volume.values, mbar, f_S.layers, sample.mask, sample.label, chosen.mode, chosen.provenance)

    def collate(self, items: Sequence[PreparedSample]):
        vol, mbar, feats = batch_tensors([(p.volume, p.initial_map, p.features) for p in items])
        mask = torch.from_numpy(np.stack([p.mask for p in items]).astype(np.float32))
        labels = torch.tensor([p.label for p in items], dtype=torch.long)
        return vol, mbar, feats, mask, labels

    # optimisation

    def training_step(self, items: Sequence[PreparedSample]) -> StepResult:
        self.model.train()
        vol, mbar, feats, mask, labels = self.collate(items)
        out = self.model(vol, mbar, feats)
        probs = upsample_probs(out.probs, tuple(mask.shape[-2:]))
        bd: LossBreakdown = total_loss(probs, mask, out.class_logits, labels, self.loss_cfg)
        if not torch.isfinite(bd.total):
            raise NumericError(f"non-finite loss at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        bd.total.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.trainer.grad_clip))
        if not np.isfinite(grad_norm):
            raise NumericError(f"non-finite gradient norm at step {self.step}")
        self.optimizer.step()
        self.step += 1
        modes = {p.template_mode for p in items}
        return StepResult(bd.as_dict(), bd.gammas.detach().numpy().copy(), out.class_logits.detach().numpy().copy(),
                          labels.numpy(), modes.pop() if len(modes) == 1 else "mixed", grad_norm,
                          self.optimizer.param_groups[0]["lr"])

    def epoch_samples(self, epoch: int) -> list[TrainingSample]:
        n = self.cfg.trainer.samples_per_epoch or None
        return build_epoch(self.pool, self.synth, seed=self.cfg.run.seed * 7_919 + epoch * 104_729, num_samples=n)

    def _log(self, record: dict) -> None:
        self.history.append(record)
        with open(self.run_dir / "log.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def state(self) -> dict:
        return {
            "config": format_config(self.cfg),
            "filter_config": self.filter_cfg.to_dict(),
            "categories": self.categories,
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "epoch": self.epoch,
            "batch": self.batch,
            "step": self.step,
            "best_loss": self.best_loss,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, payload: dict) -> None:
        if payload["filter_config"] != self.filter_cfg.to_dict():
            raise ConfigError("checkpoint filter configuration does not match this run")
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.scheduler.load_state_dict(payload["scheduler"])
        self.epoch, self.batch, self.step = payload["epoch"], payload["batch"], payload["step"]
        self.best_loss = payload["best_loss"]
        torch.set_rng_state(payload["torch_rng"])

    def save(self, name: str) -> Path:
        return save_checkpoint(self.run_dir / "ckpt" / name, self.state())

    def run(self, resume_from=None) -> Path:
        """Train until ``trainer.epochs`` or ``trainer.max_steps``; returns the last checkpoint."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.echo").write_text(format_config(self.cfg))
        if resume_from is not None:
            self.load_state(load_checkpoint(resume_from))
        tc = self.cfg.trainer
        last = None
        while self.epoch < tc.epochs:
            samples = self.epoch_samples(self.epoch)
            batches = [samples[i:i + tc.batch_size] for i in range(0, len(samples), tc.batch_size)]
            epoch_losses = []
            while self.batch < len(batches):
                if tc.max_steps and self.step >= tc.max_steps:
                    return self.save(f"step_{self.step:06d}.ckpt")
                k0 = self.batch * tc.batch_size
                items = [self.prepare(s, self.template_seed(self.epoch, k0 + i), step=self.step)
                         for i, s in enumerate(batches[self.batch])]
                result = self.training_step(items)
                self.batch += 1
                epoch_losses.append(result.losses["total"])
                self._log({"step": self.step, "epoch": self.epoch, **result.losses,
                           "grad_norm": result.grad_norm, "lr": result.lr, "template_mode": result.template_mode})
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            if epoch_losses:
                self.scheduler.step(mean_loss)
            self.epoch += 1
            self.batch = 0
            if mean_loss < self.best_loss:
                self.best_loss = mean_loss
                self.save("best.ckpt")
            if tc.checkpoint_every_epoch:
                last = self.save(f"epoch_{self.epoch:03d}.ckpt")
        return last if last is not None else self.save(f"epoch_{self.epoch:03d}.ckpt")


def train(cfg: RunConfig, dataset, run_dir=None, resume_from=None) -> Path:
    """Train on a :class:`DatasetIndex` or an in-memory list of normal images."""
    if isinstance(dataset, DatasetIndex):
        pool = load_train_pool(dataset, cfg.run.image_size)
    else:
        pool = list(dataset)
    return Trainer(cfg, pool, run_dir).run(resume_from)
