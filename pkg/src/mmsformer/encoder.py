"""Modality-specific hierarchical mix-transformer encoder.

Features travel between ops as token matrices ``[N, C]`` with ``N = H * W`` in
row-major pixel order; stage outputs are returned channel-major ``[C, H, W]``.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import EncoderConfig, StageConfig
from .errors import ConfigError, ShapeError
from .tensor import Conv2d, LayerNorm, Linear, Module, ModuleList, Tensor


def tokens_to_map(x: Tensor, H: int, W: int) -> Tensor:
    """[N, C] -> [C, H, W]."""
    return x.T.reshape(x.shape[1], H, W)


def map_to_tokens(x: Tensor) -> Tensor:
    """[C, H, W] -> [N, C]."""
    C, H, W = x.shape
    return x.reshape(C, H * W).T


class OverlapPatchEmbed(Module):
    """Strided overlapping convolution followed by layer norm over channels."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int, rng):
        super().__init__()
        self.proj = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, padding=pad, exact=False)
        self.norm = LayerNorm(out_ch)

    def forward(self, x: Tensor):
        y = self.proj(x)
        _, H, W = y.shape
        return self.norm(map_to_tokens(y)), H, W


def spatial_reduce(x: Tensor, ratio: int, proj: Linear, norm: LayerNorm) -> Tensor:
    """Fold every ``ratio`` consecutive tokens into one row, project back to C, normalise."""
    N, C = x.shape
    if N % ratio:
        raise ShapeError(f"spatial_reduce: N={N} tokens not divisible by reduction ratio {ratio}")
    return norm(proj(x.reshape(N // ratio, C * ratio)))


class EfficientAttention(Module):
    def __init__(self, dim: int, heads: int, ratio: int, rng):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention: channels={dim} not divisible by heads={heads}")
        self.dim, self.heads, self.ratio = dim, heads, ratio
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        if ratio > 1:
            self.sr = Linear(dim * ratio, dim, rng)
            self.sr_norm = LayerNorm(dim)
        self.proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        N, C = x.shape
        if C != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {C}")
        h, d = self.heads, self.head_dim
        kv_in = spatial_reduce(x, self.ratio, self.sr, self.sr_norm) if self.ratio > 1 else x
        M = kv_in.shape[0]
        q = self.q(x).reshape(N, h, d).transpose(1, 0, 2)
        k = self.k(kv_in).reshape(M, h, d).transpose(1, 2, 0)
        v = self.v(kv_in).reshape(M, h, d).transpose(1, 0, 2)
        attn = T.softmax(T.matmul(q, k) * (1.0 / math.sqrt(d)), axis=-1)
        self.last_weights = attn.data
        out = T.matmul(attn, v).transpose(1, 0, 2).reshape(N, C)
        return self.proj(out)


class MixFFN(Module):
    """Linear C->eC, 3x3 depthwise conv, GELU, linear eC->C; ``forward`` adds the input back."""

    def __init__(self, dim: int, expansion: int, rng):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def branch(self, x: Tensor, H: int, W: int) -> Tensor:
        if x.shape[0] != H * W:
            raise ShapeError(f"mix_ffn: N={x.shape[0]} does not equal H*W={H}*{W}")
        y = self.fc1(x)
        y = T.gelu(self.dwconv(tokens_to_map(y, H, W)))
        return self.fc2(map_to_tokens(y))

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        return self.branch(x, H, W) + x


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, cfg: StageConfig, rng):
        super().__init__()
        self.norm1 = LayerNorm(cfg.channels)
        self.attn = EfficientAttention(cfg.channels, cfg.heads, cfg.reduction_ratio, rng)
        self.norm2 = LayerNorm(cfg.channels)
        self.ffn = MixFFN(cfg.channels, cfg.ffn_expansion, rng)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn.branch(self.norm2(x), H, W)


class Stage(Module):
    def __init__(self, in_ch: int, cfg: StageConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.embed = OverlapPatchEmbed(in_ch, cfg.channels, cfg.patch_kernel, cfg.patch_stride, cfg.patch_pad, rng)
        self.blocks = ModuleList(Block(cfg, rng) for _ in range(cfg.depth))
        self.norm = LayerNorm(cfg.channels)

    def forward(self, x: Tensor) -> Tensor:
        t, H, W = self.embed(x)
        for blk in self.blocks:
            t = blk(t, H, W)
        return tokens_to_map(self.norm(t), H, W)


class MixTransformerEncoder(Module):
    """Four stages producing features at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        stages, in_ch = [], cfg.in_channels
        for s in cfg.stages:
            stages.append(Stage(in_ch, s, rng))
            in_ch = s.channels
        self.stages = ModuleList(stages)

    def forward(self, image: Tensor) -> list[Tensor]:
        check_input_extent(image, self.cfg.in_channels)
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def check_input_extent(image: Tensor, in_channels: int = 3) -> None:
    if image.ndim != 3 or image.shape[0] != in_channels:
        raise ShapeError(f"encoder input must be [{in_channels},H,W], got {image.shape}")
    _, H, W = image.shape
    if H % 32 or W % 32:
        raise ConfigError(f"input extent {H}x{W} invalid: height and width must both be divisible by 32")
