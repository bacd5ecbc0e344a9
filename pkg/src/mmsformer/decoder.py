"""Shared all-MLP decoder and the argmax readout."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .errors import ShapeError
from .tensor import Linear, Module, ModuleList, Tensor


class MLPDecoder(Module):
    def __init__(self, in_channels: Sequence[int], cfg: DecoderConfig, rng):
        super().__init__()
        self.in_channels = list(in_channels)
        D = cfg.embed_dim
        self.embed = ModuleList(Linear(c, D, rng) for c in self.in_channels)
        self.fuse = Linear(len(self.in_channels) * D, D, rng)
        self.classify = Linear(D, cfg.num_classes, rng)

    def forward(self, pyramid: Sequence[Tensor]) -> Tensor:
        """Fused pyramid (strides 4..32) -> logits ``[K, H/4, W/4]``."""
        if len(pyramid) != len(self.in_channels):
            raise ShapeError(f"decoder expects {len(self.in_channels)} levels, got {len(pyramid)}")
        _, H, W = pyramid[0].shape
        levels = []
        for i, (f, lin) in enumerate(zip(pyramid, self.embed)):
            if f.ndim != 3 or f.shape[0] != self.in_channels[i]:
                raise ShapeError(f"decoder level {i + 1}: expected [{self.in_channels[i]},H,W], got {f.shape}")
            levels.append(T.bilinear_upsample(lin.pointwise(f), H, W))
        return self.classify.pointwise(self.fuse.pointwise(T.concat(levels, axis=0)))


def predict_labels(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 3 or data.shape[0] < 2:
        raise ShapeError(f"predict_labels expects [K>=2,H,W], got {data.shape}")
    return np.argmax(data, axis=0).astype(np.int64)
