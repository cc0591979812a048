"""Learned cost-volume filter.

A 3D U-Net over ``(matching channels, layer depth, H', W')`` volumes. Each
encoder scale except the bottleneck ends in a guided residual
channel-spatial attention block (RCSA) whose input is the scale's features
concatenated with projections of the initial anomaly map and of the input
features. Those attended features feed the decoder through skip
connections. The last decoder stage collapses the depth axis, the head takes
the min over the matching axis, applies a convolution to two channels and a
per-pixel softmax (channel 0: normal, channel 1: anomalous). A class-aware
adaptor reads the bottleneck.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError

DN_MAPPINGS = ("channel", "depth")


@dataclass
class FilterConfig:
    K: int
    depth: int
    feature_channels: int
    num_classes: int = 1
    base_channels: int = 32
    num_scales: int = 4
    guidance_sg: bool = True
    guidance_mg: bool = True
    dn_mapping: str = "channel"
    guidance_channels: int = 8
    reduction: int = 4
    spatial_kernel: int = 7
    head_kernel: int = 3
    volume_residual: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_scales < 2:
            raise ConfigError("num_scales must be >= 2")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.dn_mapping not in DN_MAPPINGS:
            raise ConfigError(f"dn_mapping must be one of {DN_MAPPINGS}")
        if min(self.K, self.depth, self.feature_channels, self.base_channels) < 1:
            raise ConfigError("K, depth, feature_channels and base_channels must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilterOutput:
    probs: torch.Tensor  # (B, 2, H', W')
    class_logits: torch.Tensor  # (B, num_classes)
    filtered: torch.Tensor  # (B, K, H', W'), filtered costs before the min

    @property
    def anomaly(self) -> torch.Tensor:
        return self.probs[:, 1]


def _groups(channels: int) -> int:
    for g in (4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, stride=1):
        super().__init__(
            nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.LeakyReLU(0.1),
        )


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations at {where}")


class GuidanceProjector(nn.Module):
    """Resample a guidance volume to a scale's grid, then mix channels 1x1x1.

    The source depth must equal the target depth or be 1 (broadcast).
    Spatial downsampling by an integer factor uses average pooling; any
    other resize is trilinear.
    """

    def __init__(self, in_ch: int, out_ch: int, identity_init: bool = False):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 1)
        if identity_init:
            if in_ch != out_ch:
                raise ConfigError("identity init needs in_ch == out_ch")
            with torch.no_grad():
                self.conv.weight.copy_(torch.eye(in_ch).reshape(in_ch, in_ch, 1, 1, 1))
                self.conv.bias.zero_()

    def forward(self, g: torch.Tensor, target: tuple[int, int, int]) -> torch.Tensor:
        depth, h, w = target
        gd, gh, gw = g.shape[-3:]
        if gd not in (depth, 1):
            raise ShapeError(f"guidance depth {gd} cannot map onto depth {depth}")
        if (gh, gw) != (h, w):
            if gh % h == 0 and gw % w == 0:
                g = F.adaptive_avg_pool3d(g, (gd, h, w))
            else:
                g = F.interpolate(g, size=(gd, h, w), mode="trilinear", align_corners=False)
        if gd != depth:
            g = g.expand(-1, -1, depth, -1, -1)
        return self.conv(g)


class RCSA(nn.Module):
    """Residual channel then spatial attention.

    Channel stage: ``w = sigmoid(mlp(maxpool(x)) + mlp(avgpool(x)))`` with
    ``w`` of shape ``(B, C, 1, 1, 1)`` and ``x_ca = w * x + x``. Spatial stage:
    ``s = sigmoid(conv(cat(mean_c(x_ca), max_c(x_ca))))`` of shape
    ``(B, 1, D, H, W)`` and ``x_sa = s * x_ca + x_ca``.
    """

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv3d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv3d(hidden, channels, 1, bias=False),
        )
        self.spatial = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        mp = torch.amax(x, dim=(2, 3, 4), keepdim=True)
        ap = x.mean(dim=(2, 3, 4), keepdim=True)
        w_c = torch.sigmoid(self.mlp(mp) + self.mlp(ap))
        x_ca = w_c * x + x
        pooled = torch.cat([x_ca.mean(dim=1, keepdim=True), x_ca.amax(dim=1, keepdim=True)], dim=1)
        w_s = torch.sigmoid(self.spatial(pooled))
        x_sa = w_s * x_ca + x_ca
        if return_attention:
            return x_sa, w_c, w_s
        return x_sa


class GuidedRCSA(nn.Module):
    """Concatenate projected guidance onto the volume features, then RCSA."""

    def __init__(self, channels: int, cfg: FilterConfig, mbar_channels: int, feat_channels: int):
        super().__init__()
        g = cfg.guidance_channels
        self.proj_m = GuidanceProjector(mbar_channels, g) if cfg.guidance_mg else None
        self.proj_f = GuidanceProjector(feat_channels, g) if cfg.guidance_sg else None
        self.out_channels = channels + g * cfg.guidance_mg + g * cfg.guidance_sg
        self.rcsa = RCSA(self.out_channels, cfg.reduction, cfg.spatial_kernel)

    def concat(self, x, mbar, feats):
        target = tuple(x.shape[-3:])
        parts = [x]
        if self.proj_m is not None:
            parts.append(self.proj_m(mbar, target))
        if self.proj_f is not None:
            parts.append(self.proj_f(feats, target))
        return torch.cat(parts, dim=1)

    def forward(self, x, mbar, feats, return_attention: bool = False):
        return self.rcsa(self.concat(x, mbar, feats), return_attention=return_attention)


class OutputHead(nn.Module):
    """``softmax(conv(min over matching channels))``."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, kernel_size, padding=kernel_size // 2)
        with torch.no_grad():
            # start with anomaly logit rising with the min cost
            self.conv.weight.zero_()
            c = kernel_size // 2
            self.conv.weight[0, 0, c, c] = -2.0
            self.conv.weight[1, 0, c, c] = 2.0
            self.conv.bias.copy_(torch.tensor([0.5, -0.5]))

    @staticmethod
    def min_pool(filtered: torch.Tensor) -> torch.Tensor:
        return filtered.amin(dim=1, keepdim=True)

    def forward(self, filtered: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.conv(self.min_pool(filtered)), dim=1)


class ClassAdaptor(nn.Module):
    """Spatial average pooling of bottleneck features, then a linear layer."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, deep: torch.Tensor) -> torch.Tensor:
        return self.fc(deep.mean(dim=(2, 3, 4)))


class CostFilterNet(nn.Module):
    """3D U-Net cost-volume filter.

    Inputs: ``volume (B, K, L, H', W')``, ``initial_map (B, L, H', W')`` and
    ``features (B, L, C, H', W')``.
    """

    def __init__(self, cfg: FilterConfig):
        super().__init__()
        self.cfg = cfg
        S = cfg.num_scales
        widths = [cfg.base_channels * 2**s for s in range(S)]
        if cfg.dn_mapping == "channel":
            in_ch, mbar_ch, feat_ch = cfg.K, 1, cfg.feature_channels
        else:
            in_ch, mbar_ch, feat_ch = cfg.depth, cfg.depth, cfg.depth * cfg.feature_channels
        self.stem = ConvBlock(in_ch, widths[0])
        self.enc = nn.ModuleList()
        self.attn = nn.ModuleList()
        skip_ch = []
        prev = widths[0]
        for s in range(S):
            self.enc.append(ConvBlock(prev, widths[s], stride=1 if s == 0 else (1, 2, 2)))
            prev = widths[s]
            if s < S - 1:
                block = GuidedRCSA(widths[s], cfg, mbar_ch, feat_ch)
                self.attn.append(block)
                skip_ch.append(block.out_channels)
                prev = block.out_channels
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        below = widths[-1]
        for s in reversed(range(S - 1)):
            self.up.append(ConvBlock(below, widths[s]))
            self.fuse.append(ConvBlock(widths[s] + skip_ch[s], widths[s]))
            self.dec_attn.append(RCSA(widths[s], cfg.reduction, cfg.spatial_kernel))
            below = widths[s]
        net_depth = cfg.depth if cfg.dn_mapping == "channel" else cfg.K
        if cfg.dn_mapping == "channel":
            # collapses the layer-depth axis to 1 and returns to K matching channels
            self.condense = nn.Conv3d(widths[0], cfg.K, (net_depth, 1, 1))
        else:
            self.condense = nn.Conv3d(widths[0], 1, 1)
        self.head = OutputHead(cfg.head_kernel)
        self.adaptor = ClassAdaptor(widths[-1], cfg.num_classes)

    def _layout(self, volume, initial_map, features):
        cfg = self.cfg
        B, K, L, H, W = volume.shape
        if K != cfg.K:
            raise ShapeError(f"volume has {K} matching channels, config expects {cfg.K}")
        if L != cfg.depth:
            raise ShapeError(f"volume depth {L} does not match config depth {cfg.depth}")
        if features.shape[2] != cfg.feature_channels:
            raise ShapeError(f"features have {features.shape[2]} channels, config expects {cfg.feature_channels}")
        if cfg.dn_mapping == "channel":
            x = volume
            mbar = initial_map.unsqueeze(1)
            feats = features.transpose(1, 2)
        else:
            x = volume.transpose(1, 2)
            mbar = initial_map.unsqueeze(2)
            feats = features.reshape(B, L * features.shape[2], 1, H, W)
        return x, mbar, feats

    def forward(self, volume, initial_map, features) -> FilterOutput:
        x, mbar, feats = self._layout(volume, initial_map, features)
        x = self.stem(x)
        skips = []
        for s, block in enumerate(self.enc):
            x = block(x)
            if s < len(self.attn):
                x = self.attn[s](x, mbar, feats)
                skips.append(x)
            _check_finite(x, f"encoder scale {s}")
        logits = self.adaptor(x)
        for k, (up, fuse, attn) in enumerate(zip(self.up, self.fuse, self.dec_attn)):
            skip = skips[-1 - k]
            x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
            x = attn(fuse(torch.cat([up(x), skip], dim=1)))
            _check_finite(x, f"decoder scale {len(skips) - 1 - k}")
        x = self.condense(x)
        if self.cfg.dn_mapping == "channel":
            filtered = x[:, :, 0]
        else:
            filtered = x[:, 0]
        if self.cfg.volume_residual:
            filtered = filtered + volume.mean(dim=2)
        probs = self.head(filtered)
        _check_finite(probs, "output head")
        return FilterOutput(probs=probs, class_logits=logits, filtered=filtered)


def build_filter(cfg: FilterConfig) -> CostFilterNet:
    """Construct the network with weights drawn from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return CostFilterNet(cfg)


def filter_forward(model: CostFilterNet, volume, initial_map, features) -> FilterOutput:
    return model(volume, initial_map, features)


def rcsa_forward(block: GuidedRCSA, x, initial_map, features, return_attention: bool = False):
    return block(x, initial_map, features, return_attention=return_attention)


def adaptor_logits(adaptor: ClassAdaptor, deep_features) -> torch.Tensor:
    return adaptor(deep_features)


def guidance_project(projector: GuidanceProjector, guidance, target_shape) -> torch.Tensor:
    return projector(guidance, tuple(target_shape))


def upsample_probs(probs: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a two-channel probability map; convex weights keep the sum at 1."""
    if tuple(probs.shape[-2:]) == tuple(size):
        return probs
    return F.interpolate(probs, size=tuple(size), mode="bilinear", align_corners=False)
