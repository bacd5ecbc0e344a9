"""Per-stage multimodal fusion block.

Given M feature maps ``[C, H, W]`` of one encoder stage::

    fused  = Linear(F_1 || ... || F_M)                 # M*C -> C per pixel
    mixed  = Linear(t + sum_k Conv_kxk(t)), t = Linear(fused)
    output = SE(fused) + mixed

The ablation flags drop the SE residual, the convolution sum, or everything
after the linear fusion.
"""
from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .config import FusionConfig
from .errors import ConfigError, ShapeError
from .tensor import Conv2d, Linear, Module, ModuleList, Tensor


class SEBlock(Module):
    """Squeeze-and-excitation gate: sigmoid(w2 . relu(w1 . avgpool(x))) scaling each channel."""

    def __init__(self, channels: int, hidden: int, rng):
        super().__init__()
        # fan-in scaled init: with std-0.02 weights the gate starts flat at 0.5 and its
        # gradients (proportional to the other layer's weights) are too small to leave it
        self.w1 = Linear(channels, hidden, rng, init="uniform_fan_in")
        self.w2 = Linear(hidden, channels, rng, init="uniform_fan_in")
        self.last_gate = None

    def gate(self, x: Tensor) -> Tensor:
        C = x.shape[0]
        if C != self.w1.in_features:
            raise ShapeError(f"SE block built for {self.w1.in_features} channels, got {C}")
        s = T.global_avg_pool(x).reshape(1, C)
        g = T.sigmoid(self.w2(T.relu(self.w1(s))))
        self.last_gate = g.data.reshape(C)
        return g.reshape(C, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class FusionBlock(Module):
    def __init__(self, channels: int, num_modalities: int, cfg: FusionConfig, rng):
        super().__init__()
        cfg.validate()
        self.channels, self.num_modalities, self.cfg = channels, num_modalities, cfg
        self.linear_fuse = Linear(num_modalities * channels, channels, rng)
        if cfg.linear_only:
            return
        self.proj_in = Linear(channels, channels, rng)
        if cfg.enable_parallel_convs:
            groups = channels if cfg.conv_grouping == "depthwise" else 1
            self.convs = ModuleList(
                Conv2d(channels, channels, k, rng, padding=(k - 1) // 2, groups=groups) for k in cfg.kernel_sizes
            )
        self.proj_out = Linear(channels, channels, rng)
        if cfg.enable_channel_attention:
            self.se = SEBlock(channels, cfg.se_hidden(channels), rng)

    @property
    def kernel_sizes(self) -> list[int]:
        convs = getattr(self, "convs", None)
        return [c.kernel_size for c in convs] if convs is not None else []

    def linear_fuse_maps(self, features: Sequence[Tensor]) -> Tensor:
        check_modalities(features, self.num_modalities, self.channels)
        x = features[0] if len(features) == 1 else T.concat(features, axis=0)
        return self.linear_fuse.pointwise(x)

    def multi_scale_mix(self, fused: Tensor) -> Tensor:
        t = self.proj_in.pointwise(fused)
        total = t
        if self.cfg.enable_parallel_convs:
            for conv in self.convs:
                total = total + conv(t)
        return self.proj_out.pointwise(total)

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        fused = self.linear_fuse_maps(features)
        if self.cfg.linear_only:
            return fused
        out = self.multi_scale_mix(fused)
        if self.cfg.enable_channel_attention:
            out = self.se(fused) + out
        return out


def check_modalities(features: Sequence[Tensor], expected: int, channels: int) -> None:
    if len(features) != expected:
        raise ConfigError(f"fusion block built for {expected} modalities, got {len(features)}")
    if not features:
        raise ShapeError("fusion needs at least one modality")
    ref = features[0].shape
    if len(ref) != 3 or ref[0] != channels:
        raise ShapeError(f"modality 0 has shape {ref}, expected [{channels},H,W]")
    for m, f in enumerate(features[1:], 1):
        if f.shape != ref:
            raise ShapeError(f"modality {m} has shape {f.shape}, expected {ref} (modality 0)")
