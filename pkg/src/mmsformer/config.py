"""Model and training configuration, and the flat ``key = value`` text format.

Nested dataclasses flatten to dotted keys (``encoder.stage3.channels = 32``);
lists are comma separated and booleans are ``true``/``false``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("full", "no_channel_attention", "no_parallel_convs", "kernels_3_7_11", "linear_only")
REDUCTION_RATIOS = (1, 2, 4, 8)


@dataclass
class StageConfig:
    depth: int = 1
    channels: int = 8
    heads: int = 1
    reduction_ratio: int = 8
    ffn_expansion: int = 4
    patch_kernel: int = 3
    patch_stride: int = 2
    patch_pad: int = 1

    def validate(self, where: str) -> None:
        if self.depth < 0 or self.channels < 1 or self.heads < 1 or self.ffn_expansion < 1:
            raise ConfigError(f"{where}: depth, channels, heads and ffn_expansion must be positive")
        if self.channels % self.heads:
            raise ConfigError(f"{where}: channels={self.channels} not divisible by heads={self.heads}")
        if self.reduction_ratio not in REDUCTION_RATIOS:
            raise ConfigError(f"{where}: reduction_ratio must be one of {REDUCTION_RATIOS}, got {self.reduction_ratio}")


def _desk_stages() -> list[StageConfig]:
    stages = []
    for i, (c, h, r) in enumerate(zip((8, 16, 32, 64), (1, 2, 4, 8), (8, 4, 2, 1))):
        k, s, p = (7, 4, 3) if i == 0 else (3, 2, 1)
        stages.append(StageConfig(1, c, h, r, 4, k, s, p))
    return stages


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stage1: StageConfig = field(default_factory=lambda: _desk_stages()[0])
    stage2: StageConfig = field(default_factory=lambda: _desk_stages()[1])
    stage3: StageConfig = field(default_factory=lambda: _desk_stages()[2])
    stage4: StageConfig = field(default_factory=lambda: _desk_stages()[3])

    @property
    def stages(self) -> list[StageConfig]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    @property
    def channels(self) -> list[int]:
        return [s.channels for s in self.stages]

    def validate(self) -> None:
        total = 1
        for i, s in enumerate(self.stages, 1):
            s.validate(f"encoder.stage{i}")
            total *= s.patch_stride
            if total != 2 ** (i + 1):
                raise ConfigError(f"encoder: cumulative stride after stage {i} is {total}, expected {2 ** (i + 1)}")


@dataclass
class FusionConfig:
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 5, 7])
    se_reduction: int = 16
    conv_grouping: str = "depthwise"
    enable_channel_attention: bool = True
    enable_parallel_convs: bool = True
    linear_only: bool = False

    def se_hidden(self, channels: int) -> int:
        return max(1, channels // self.se_reduction)

    def validate(self) -> None:
        if self.conv_grouping not in ("depthwise", "dense"):
            raise ConfigError(f"fusion.conv_grouping must be depthwise or dense, got {self.conv_grouping!r}")
        if self.se_reduction < 1:
            raise ConfigError("fusion.se_reduction must be >= 1")
        if self.enable_parallel_convs and not self.linear_only:
            if not self.kernel_sizes:
                raise ConfigError("fusion.kernel_sizes is empty while parallel convolutions are enabled")
            for k in self.kernel_sizes:
                if k < 1 or k % 2 == 0:
                    raise ConfigError(f"fusion.kernel_sizes must be odd positive ints, got {k}")


@dataclass
class DecoderConfig:
    embed_dim: int = 32
    num_classes: int = 4

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("decoder.embed_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("decoder.num_classes must be >= 2")


@dataclass
class ModelConfig:
    num_modalities: int = 1
    variant: str = "full"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        self.apply_variant()
        self.validate()

    def apply_variant(self) -> None:
        """Rewrite the fusion flags for the selected ablation variant."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        f = self.fusion
        f.enable_channel_attention = self.variant not in ("no_channel_attention", "linear_only")
        f.enable_parallel_convs = self.variant not in ("no_parallel_convs", "linear_only")
        f.linear_only = self.variant == "linear_only"
        if self.variant == "kernels_3_7_11":
            f.kernel_sizes = [3, 7, 11]

    def validate(self) -> None:
        if self.num_modalities < 1:
            raise ConfigError("num_modalities must be >= 1")
        self.encoder.validate()
        self.fusion.validate()
        self.decoder.validate()

    def replace(self, **changes) -> "ModelConfig":
        return from_flat(ModelConfig, {**to_flat(self), **{k: _format(v) for k, v in changes.items()}})


@dataclass
class TrainConfig:
    base_lr: float = 6e-5
    total_epochs: int = 200
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    poly_power: float = 0.9
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    adam_betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("train: need 0 <= warmup_epochs <= total_epochs")
        if min(self.base_lr, self.warmup_factor, self.poly_power, self.adam_eps) <= 0 or self.weight_decay < 0:
            raise ConfigError("train: rates must be positive")
        if self.batch_size < 1 or len(self.adam_betas) != 2:
            raise ConfigError("train: batch_size must be >= 1 and adam_betas must be a pair")


def full_scale_config(num_modalities: int = 4, num_classes: int = 20, **kw) -> ModelConfig:
    """Published-width preset (64/128/320/512 channels, depths 3/4/6/3, D=768) for cost accounting."""
    stages = {}
    for i, (d, c, h, r) in enumerate(zip((3, 4, 6, 3), (64, 128, 320, 512), (1, 2, 5, 8), (8, 4, 2, 1))):
        k, s, p = (7, 4, 3) if i == 0 else (3, 2, 1)
        stages[f"stage{i + 1}"] = StageConfig(d, c, h, r, 4, k, s, p)
    return ModelConfig(
        num_modalities=num_modalities,
        encoder=EncoderConfig(**stages),
        decoder=DecoderConfig(embed_dim=768, num_classes=num_classes),
        **kw,
    )


# -- flat key/value serialisation ---------------------------------------------
def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_flat(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _format(v)
    return out


def _parse(text: str, tp, key: str):
    try:
        if tp is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp in (int, float, str):
            return tp(text.strip())
        origin = typing.get_origin(tp)
        if origin is list:
            (inner,) = typing.get_args(tp)
            return [_parse(t, inner, key) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_flat(cls, flat: dict[str, str], prefix: str = "", strict: bool = True):
    """Build ``cls`` from dotted keys; unknown keys under ``prefix`` raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = from_flat(tp, flat, key + ".", strict=False)
        elif key in flat:
            kwargs[f.name] = _parse(flat[key], tp, key)
    if strict:
        known = set(to_flat(cls(), prefix)) if prefix == "" else None
        if known is not None:
            extra = sorted(k for k in flat if k not in known)
            if extra:
                raise ConfigError(f"unknown config keys: {', '.join(extra)}")
    return cls(**kwargs)


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_kv(flat: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_kv(text, str(path))


def subset(flat: dict[str, str], prefix: str) -> dict[str, str]:
    """Keys under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}
