"""MMSFormer assembly: M encoders, four fusion blocks and one shared decoder."""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, dump_kv, from_flat, parse_kv, to_flat
from .decoder import MLPDecoder
from .encoder import MixTransformerEncoder, check_input_extent
from .errors import ConfigError, FormatError, MissingFileError, ShapeError
from .fusion import FusionBlock
from .tensor import Module, ModuleList, Tensor


class MMSFormer(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoders = ModuleList(MixTransformerEncoder(config.encoder, rng) for _ in range(config.num_modalities))
        self.fusion = ModuleList(
            FusionBlock(c, config.num_modalities, config.fusion, rng) for c in config.encoder.channels
        )
        self.decoder = MLPDecoder(config.encoder.channels, config.decoder, rng)

    def encode(self, images: Sequence[Tensor]) -> list[list[Tensor]]:
        M = self.config.num_modalities
        if len(images) != M:
            raise ConfigError(f"model expects {M} modalities, got {len(images)}")
        ref = images[0].shape
        for m, img in enumerate(images):
            check_input_extent(img, self.config.encoder.in_channels)
            if img.shape != ref:
                raise ShapeError(f"modality {m} has shape {img.shape}, modality 0 has {ref}")
        return [enc(img) for enc, img in zip(self.encoders, images)]

    def fuse(self, pyramids: list[list[Tensor]]) -> list[Tensor]:
        return [block([p[i] for p in pyramids]) for i, block in enumerate(self.fusion)]

    def forward(self, images: Sequence[Tensor], full_resolution: bool = True) -> Tensor:
        images = [img if isinstance(img, Tensor) else Tensor(img) for img in images]
        logits = self.decoder(self.fuse(self.encode(images)))
        if full_resolution:
            _, H, W = images[0].shape
            logits = T.bilinear_upsample(logits, H, W)
        return logits

    def manifest(self) -> list[tuple[str, tuple]]:
        return [(name, p.shape) for name, p in self.named_parameters()]

    def summary(self) -> str:
        lines = [f"MMSFormer variant={self.config.variant} modalities={self.config.num_modalities}"]
        for i, block in enumerate(self.fusion, 1):
            ks = block.kernel_sizes
            lines.append(
                f"  fusion.stage{i}: C={block.channels} kernels={ks or '-'} "
                f"se={'on' if hasattr(block, 'se') else 'off'} params={block.num_parameters()}"
            )
        lines.append(f"  total params={self.num_parameters()}")
        return "\n".join(lines)


def build(config: ModelConfig) -> MMSFormer:
    """Deterministically initialise a model from ``config.seed``."""
    config.apply_variant()
    config.validate()
    return MMSFormer(config)


# -- checkpoints -------------------------------------------------------------
MAGIC = b"MMSFCKPT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, model: MMSFormer, step: int = 0) -> None:
    """Write config, step counter and every named parameter (little-endian payloads)."""
    buf = io.BytesIO()
    cfg = dump_kv(to_flat(model.config)).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQI", VERSION, step, len(cfg)))
    buf.write(cfg)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        arr = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], int]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MissingFileError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, step, cfg_len = r.unpack("<IQI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = from_flat(ModelConfig, parse_kv(r.take(cfg_len).decode(), str(path)))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{ndim}I")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(dims).copy()
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return config, tensors, step


def load_checkpoint(path) -> tuple[MMSFormer, int]:
    config, tensors, step = read_checkpoint(path)
    dt = next(iter(tensors.values())).dtype if tensors else np.float32
    with T.precision("float64" if dt == np.float64 else "float32"):
        model = build(config)
    load_state(model, tensors)
    return model, step


def load_state(model: MMSFormer, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise FormatError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = np.ascontiguousarray(arr, dtype=p.dtype)
        p.zero_grad()
