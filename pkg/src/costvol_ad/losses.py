"""Composite training objective.

``total = focal + ce + alpha * (soft_iou + ssim)``, each term switchable.
The focal exponent is modulated per sample by the class-aware adaptor:
``gamma = gamma0 - sigmoid(logit of the true class)`` when the adaptor's
argmax is correct, ``gamma0`` otherwise. The modulation is a stop-gradient
signal; no gradient flows into the logits through ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

LOG_CLAMP = 1e-12
IOU_EPS = 1e-6
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossConfig:
    alpha: float = 0.1
    gamma0: float = 3.0
    focal: bool = True
    ce: bool = True
    soft_iou: bool = True
    ssim: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.gamma0 < 0:
            raise ConfigError("alpha and gamma0 must be non-negative")


@dataclass
class LossBreakdown:
    focal: torch.Tensor
    ce: torch.Tensor
    soft_iou: torch.Tensor
    ssim: torch.Tensor
    total: torch.Tensor
    gammas: torch.Tensor

    @property
    def effective_gamma(self) -> float:
        return float(self.gammas.mean())

    def as_dict(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("focal", "ce", "soft_iou", "ssim", "total")}
        out["effective_gamma"] = self.effective_gamma
        return out


def effective_gamma(gamma0: float, class_logits: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample focusing parameter, clamped at 0. Accepts ``(K,)`` or ``(B, K)`` logits."""
    logits = class_logits.detach()
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    labels = torch.as_tensor(labels, device=logits.device).reshape(-1).long()
    correct = logits.argmax(dim=1) == labels
    conf = torch.sigmoid(logits.gather(1, labels[:, None])[:, 0])
    gamma = torch.where(correct, gamma0 - conf, torch.full_like(conf, gamma0)).clamp_min(0.0)
    return gamma[0] if single else gamma


def _as_batch(mask: torch.Tensor) -> torch.Tensor:
    if mask.ndim == 4:
        mask = mask[:, 0]
    if mask.ndim == 2:
        mask = mask[None]
    return mask


def focal_loss(probs: torch.Tensor, mask: torch.Tensor, gamma) -> torch.Tensor:
    """Mean over pixels of ``-(1 - p_t)^gamma * log(p_t)``.

    ``probs`` is ``(B, 2, H, W)``; ``gamma`` a scalar or one value per sample.
    """
    mask = _as_batch(mask).to(probs.dtype)
    p_t = probs[:, 1] * mask + probs[:, 0] * (1 - mask)
    gamma = torch.as_tensor(gamma, dtype=probs.dtype, device=probs.device)
    if gamma.ndim == 1:
        gamma = gamma[:, None, None]
    weight = (1 - p_t).clamp_min(0.0) ** gamma
    return -(weight * torch.log(p_t.clamp_min(LOG_CLAMP))).mean()


def soft_iou_loss(anomaly: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``1 - (sum(pg) + eps) / (sum(p) + sum(g) - sum(pg) + eps)`` per sample, batch mean."""
    p = _as_batch(anomaly)
    g = _as_batch(mask).to(p.dtype)
    inter = (p * g).sum(dim=(1, 2))
    union = p.sum(dim=(1, 2)) + g.sum(dim=(1, 2)) - inter
    return (1 - (inter + IOU_EPS) / (union + IOU_EPS)).mean()


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_index(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-sample mean SSIM of ``(B, H, W)`` maps in [0, 1].

    Local statistics use a valid-mode Gaussian window; maps smaller than the
    window fall back to global statistics over the whole map.
    """
    x = _as_batch(x)
    y = _as_batch(y).to(x.dtype)
    H, W = x.shape[-2:]
    if H < window or W < window:
        dims = (1, 2)
        mu_x, mu_y = x.mean(dim=dims), y.mean(dim=dims)
        var_x = ((x - mu_x[:, None, None]) ** 2).mean(dim=dims)
        var_y = ((y - mu_y[:, None, None]) ** 2).mean(dim=dims)
        cov = ((x - mu_x[:, None, None]) * (y - mu_y[:, None, None])).mean(dim=dims)
    else:
        k = gaussian_window(window, sigma, x.dtype).to(x.device)[None, None]
        xs, ys = x[:, None], y[:, None]
        mu_x, mu_y = F.conv2d(xs, k), F.conv2d(ys, k)
        var_x = F.conv2d(xs * xs, k) - mu_x**2
        var_y = F.conv2d(ys * ys, k) - mu_y**2
        cov = F.conv2d(xs * ys, k) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    )
    return s.reshape(s.shape[0], -1).mean(dim=1)


def ssim_loss(anomaly: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (1 - ssim_index(anomaly, mask)).mean()


def ce_loss(class_logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, device=class_logits.device).reshape(-1).long()
    return F.cross_entropy(class_logits.reshape(labels.numel(), -1), labels)


def total_loss(probs, mask, class_logits, labels, config: LossConfig, gamma=None) -> LossBreakdown:
    """Weighted sum of the enabled terms.

    Without the CE term the adaptor is inactive and ``gamma = gamma0``.
    Passing ``gamma`` overrides the modulation rule.
    """
    zero = probs.new_zeros(())
    if gamma is None:
        if config.ce:
            gamma = effective_gamma(config.gamma0, class_logits, labels)
        else:
            gamma = torch.full((probs.shape[0],), config.gamma0, dtype=probs.dtype)
    gamma = torch.as_tensor(gamma, dtype=probs.dtype)
    focal = focal_loss(probs, mask, gamma) if config.focal else zero
    ce = ce_loss(class_logits, labels) if config.ce else zero
    anomaly = probs[:, 1]
    iou = soft_iou_loss(anomaly, mask) if config.soft_iou else zero
    ssim = ssim_loss(anomaly, mask) if config.ssim else zero
    total = focal + ce + config.alpha * (iou + ssim)
    if gamma.ndim == 0:
        gamma = gamma.expand(probs.shape[0])
    return LossBreakdown(focal, ce, iou, ssim, total, gamma)

