"""Run configuration.

An INI-style text file with one section per component::

    [trainer]
    epochs = 40
    batch_size = 8

Overrides use dotted keys (``trainer.epochs=1``) and apply after the file is
parsed. Unknown sections or keys are errors. ``format_config`` writes the
resolved configuration back in the same format (the run's ``config.echo``).
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset_root: str = ""
    image_size: int = 256
    deterministic: bool = True


@dataclass
class TrainerSection:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    patience: int = 3
    factor: float = 0.5
    threshold: float = 1e-3
    grad_clip: float = 5.0
    max_steps: int = 0  # 0: no cap
    samples_per_epoch: int = 0  # 0: one pass over the normal pool
    checkpoint_every_epoch: bool = True


@dataclass
class TemplatesSection:
    mode: str = "embedding"
    N: int = 3
    K: int = -1  # -1: automatic, 0: no trimming
    steps: int = 25
    blur_per_step: float = 0.05


@dataclass
class EncoderSection:
    name: str = "patchify"
    layers: tuple = (0, 1, 2, 3)
    patch: int = 16
    blur_per_layer: float = 1.0
    channels: int = 16
    stages: int = 4
    seed: int = 0


@dataclass
class FilterSection:
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


@dataclass
class LossSection:
    alpha: float = 0.1
    gamma0: float = 3.0
    focal: bool = True
    ce: bool = True
    soft_iou: bool = True
    ssim: bool = True


@dataclass
class SynthSection:
    anomaly_probability: float = 0.5
    min_area: float = 0.01
    max_area: float = 0.2
    opacity_min: float = 0.5
    opacity_max: float = 1.0
    noise_scale_min: int = 0
    noise_scale_max: int = 3
    max_retries: int = 5


@dataclass
class InferSection:
    lam: float = -1.0  # required when a baseline is fused; -1 means unset
    top_k: int = 250
    baseline_dir: str = ""
    fpr_limit: float = 0.3
    heatmaps: bool = False


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    templates: TemplatesSection = field(default_factory=TemplatesSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    filter: FilterSection = field(default_factory=FilterSection)
    loss: LossSection = field(default_factory=LossSection)
    synth: SynthSection = field(default_factory=SynthSection)
    infer: InferSection = field(default_factory=InferSection)

    def validate(self) -> "RunConfig":
        if self.trainer.epochs < 1:
            raise ConfigError("trainer.epochs must be >= 1")
        if self.trainer.batch_size < 1:
            raise ConfigError("trainer.batch_size must be >= 1")
        if self.infer.lam != -1.0 and not (0.0 <= self.infer.lam <= 1.0):
            raise ConfigError("infer.lam must lie in [0, 1]")
        if self.templates.mode not in ("reconstruction", "embedding", "hybrid"):
            raise ConfigError(f"unknown templates.mode {self.templates.mode!r}")
        if self.templates.N < 1:
            raise ConfigError("templates.N must be >= 1")
        return self

    def copy(self) -> "RunConfig":
        return parse_config(format_config(self))


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def set_value(cfg: RunConfig, dotted: str, raw: str) -> None:
    section, _, key = dotted.partition(".")
    if section not in _SECTIONS or not key:
        raise ConfigError(f"unknown config key {dotted!r}")
    obj = getattr(cfg, section)
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, key, _coerce(raw, hints[key], dotted))


def parse_config(text: str, overrides: typing.Sequence[str] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(cfg, f"{section}.{key}", raw)
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        set_value(cfg, dotted.strip(), raw)
    return cfg.validate()


def load_config(path, overrides: typing.Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), overrides)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)
