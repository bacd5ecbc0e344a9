"""Multimodal dataset layout, binary raster/label files and a synthetic generator.

Layout::

    root/manifest.txt
    root/<split>/<modality>/<id>.tns     # "TNSR" raster, float32 [3, H, W]
    root/<split>/labels/<id>.lbl         # "LBLS" label map, uint8, 255 = ignore
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import parse_kv
from .errors import ConfigError, FormatError, MissingFileError
from .metrics import IGNORE_INDEX
from .tensor import Tensor
from .tensor._kernels_py import interp_matrix

RASTER_MAGIC = b"TNSR"
LABEL_MAGIC = b"LBLS"
RASTER_VERSION = 1
BORDER = 2
MODES = ("single_modality_sufficient", "xor_fusion", "per_class_modality")


# -- file formats -------------------------------------------------------------
def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing file: {path}") from exc


def write_raster(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = RASTER_MAGIC + struct.pack(f"<II{arr.ndim}I", RASTER_VERSION, arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_raster(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 12 or data[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: not a TNSR raster")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported raster version {version}")
    head = 12 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    expected = int(np.prod(dims)) * 4
    if len(data) - head != expected:
        raise FormatError(f"{path}: payload is {len(data) - head} bytes, dims {dims} need {expected}")
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write_label(path, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.ndim != 2 or lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise FormatError("labels must be a 2-D array of values in [0, 255]")
    H, W = lab.shape
    Path(path).write_bytes(LABEL_MAGIC + struct.pack("<II", H, W) + lab.astype(np.uint8).tobytes())


def read_label(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 12 or data[:4] != LABEL_MAGIC:
        raise FormatError(f"{path}: not an LBLS label file")
    H, W = struct.unpack_from("<II", data, 4)
    if len(data) - 12 != H * W:
        raise FormatError(f"{path}: payload is {len(data) - 12} bytes, expected {H * W}")
    return np.frombuffer(data, dtype=np.uint8, offset=12).reshape(H, W).astype(np.int64)


# -- manifest & loading ---------------------------------------------------------
@dataclass
class DatasetManifest:
    modalities: list[str]
    classes: list[str]
    splits: dict[str, list[str]]
    extent: tuple[int, int]
    source: str = ""

    def to_text(self) -> str:
        lines = [
            f"modalities = {','.join(self.modalities)}",
            f"classes = {','.join(self.classes)}",
            f"extent = {self.extent[0]},{self.extent[1]}",
        ]
        if self.source:
            lines.append(f"source = {self.source}")
        lines += [f"split.{name} = {','.join(ids)}" for name, ids in self.splits.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<manifest>") -> "DatasetManifest":
        kv = parse_kv(text, source)
        try:
            mods = [m for m in kv["modalities"].split(",") if m]
            classes = [c for c in kv["classes"].split(",") if c]
            h, w = (int(v) for v in kv["extent"].split(","))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{source}: incomplete manifest ({exc})") from exc
        splits = {k[6:]: [i for i in v.split(",") if i] for k, v in kv.items() if k.startswith("split.")}
        return cls(mods, classes, splits, (h, w), kv.get("source", ""))


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.txt"
        if not self.root.is_dir():
            raise MissingFileError(f"dataset directory not found: {self.root}")
        self.manifest = DatasetManifest.from_text(_read_bytes(path).decode(), str(path))

    @property
    def modalities(self) -> list[str]:
        return self.manifest.modalities

    @property
    def classes(self) -> list[str]:
        return self.manifest.classes

    @property
    def num_classes(self) -> int:
        return len(self.manifest.classes)

    def ids(self, split: str) -> list[str]:
        return self.manifest.splits.get(split, [])

    def resolve_modalities(self, modalities: Sequence[str] | None) -> list[str]:
        if modalities is None:
            return list(self.modalities)
        unknown = [m for m in modalities if m not in self.modalities]
        if unknown:
            raise ConfigError(f"modalities {unknown} not in dataset (has {self.modalities})")
        return list(modalities)

    def load_sample(self, split: str, sample_id: str, modalities: Sequence[str] | None = None):
        """Return ([Tensor[3,H,W] per requested modality], label map [H,W])."""
        mods = self.resolve_modalities(modalities)
        images = [Tensor(read_raster(self.root / split / m / f"{sample_id}.tns")) for m in mods]
        label = read_label(self.root / split / "labels" / f"{sample_id}.lbl")
        for img in images:
            if img.shape[1:] != label.shape:
                raise FormatError(f"{split}/{sample_id}: raster {img.shape} and label {label.shape} disagree")
        return images, label

    def load_split(self, split: str, modalities: Sequence[str] | None = None):
        return [self.load_sample(split, i, modalities) for i in self.ids(split)]


def convert_external_dataset(src, dst, modality_dirs: dict[str, str], label_dir: str):
    """Placeholder converter for real multimodal datasets.

    Expected mapping: ``src/<modality_dirs[m]>/<split>/<id>.png`` becomes
    ``dst/<split>/<m>/<id>.tns`` (3 channels, single-channel sources
    replicated) and ``src/<label_dir>/<split>/<id>.png`` becomes
    ``dst/<split>/labels/<id>.lbl``. Image decoding is not part of this
    package, so the conversion itself is left to the caller.
    """
    raise NotImplementedError("image decoding is out of scope; see the docstring for the expected mapping")


# -- synthetic generator ------------------------------------------------------
@dataclass
class SynthSpec:
    num_modalities: int = 2
    num_classes: int = 2
    extent: int = 64
    n_samples: int = 8
    mode: str = "xor_fusion"
    noise_sigma: float = 0.0
    seed: int = 0
    n_val: int = 0
    cells: int = 4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown synthetic mode {self.mode!r}; expected one of {MODES}")
        if self.num_modalities < 1 or self.n_samples < 1 or self.n_val < 0:
            raise ConfigError("synthetic: num_modalities and n_samples must be >= 1")
        if self.mode != "single_modality_sufficient" and self.num_modalities < 2:
            raise ConfigError(f"synthetic mode {self.mode} needs at least 2 modalities")
        if self.mode == "xor_fusion" and self.num_classes != 2:
            raise ConfigError("xor_fusion produces exactly 2 classes")
        if self.num_classes < 2 or self.num_classes > 255:
            raise ConfigError("num_classes must be in [2, 255]")
        if self.extent < 2 * BORDER + 2 or self.noise_sigma < 0:
            raise ConfigError("extent too small or negative noise_sigma")


def smooth_field(rng: np.random.Generator, H: int, W: int, cells: int) -> np.ndarray:
    """Gaussian noise on a ``cells x cells`` grid, bilinearly enlarged to ``H x W``."""
    coarse = rng.normal(size=(cells, cells))
    return interp_matrix(cells, H) @ coarse @ interp_matrix(cells, W).T


def _with_border(label: np.ndarray) -> np.ndarray:
    out = label.copy()
    out[:BORDER], out[-BORDER:], out[:, :BORDER], out[:, -BORDER:] = (IGNORE_INDEX,) * 4
    return out


def _xor_sample(spec: SynthSpec, rng, global_sign: float):
    H = W = spec.extent
    field = smooth_field(rng, H, W, spec.cells)
    a = np.where(field > np.median(field), 1.0, -1.0)
    label = (a * global_sign > 0).astype(np.int64)
    planes = [a, np.full((H, W), global_sign)]
    planes += [np.zeros((H, W)) for _ in range(spec.num_modalities - 2)]
    return planes, label


def _region_labels(rng, spec: SynthSpec) -> np.ndarray:
    H = W = spec.extent
    fields = np.stack([smooth_field(rng, H, W, spec.cells) for _ in range(spec.num_classes)])
    return np.argmax(fields, axis=0).astype(np.int64)


def _signatures(spec: SynthSpec) -> np.ndarray:
    """Class-specific 3-channel offsets, fixed by the seed so train and val agree."""
    sig_rng = np.random.default_rng([spec.seed, 7])
    sig = sig_rng.normal(size=(spec.num_classes, 3))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True) * 1.5


def _dense_sample(spec: SynthSpec, rng, sig: np.ndarray):
    H = W = spec.extent
    label = _region_labels(rng, spec)
    onehot = (label[None] == np.arange(spec.num_classes)[:, None, None]).astype(np.float64)
    rasters = []
    for m in range(spec.num_modalities):
        if spec.mode == "single_modality_sufficient":
            owned = list(range(spec.num_classes)) if m == 0 else []
        else:
            owned = [c for c in range(1, spec.num_classes) if (c - 1) % spec.num_modalities == m]
        img = np.zeros((3, H, W))
        for c in owned:
            img += sig[c][:, None, None] * onehot[c][None]
        rasters.append(img)
    return rasters, label


def generate_synthetic(root, spec: SynthSpec, modality_names=None, class_names=None) -> Dataset:
    """Write a deterministic synthetic dataset to ``root`` and return it.

    ``xor_fusion``: modality 1 carries the sign of a smooth zero-median field,
    modality 2 a per-image sign (balanced over the split); the label is their
    product, so neither modality alone says anything about it.
    ``per_class_modality``: class c >= 1 is visible only in modality (c-1) mod M.
    ``single_modality_sufficient``: every class is visible in modality 1.
    """
    spec.validate()
    root = Path(root)
    mods = list(modality_names or [f"mod{m}" for m in range(spec.num_modalities)])
    classes = list(class_names or [f"class{c}" for c in range(spec.num_classes)])
    if len(mods) != spec.num_modalities or len(classes) != spec.num_classes:
        raise ConfigError("modality/class name lists do not match the synthetic spec")
    rng = np.random.default_rng(spec.seed)
    sig = _signatures(spec)
    splits = {"train": spec.n_samples}
    if spec.n_val:
        splits["val"] = spec.n_val
    manifest = DatasetManifest(mods, classes, {}, (spec.extent, spec.extent), f"synthetic:{spec.mode}")
    for split, n in splits.items():
        ids = [f"{i:04d}" for i in range(n)]
        manifest.splits[split] = ids
        signs = rng.permutation(np.where(np.arange(n) % 2 == 0, 1.0, -1.0))
        for d in [*mods, "labels"]:
            (root / split / d).mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(ids):
            if spec.mode == "xor_fusion":
                planes, label = _xor_sample(spec, rng, signs[i])
                rasters = [np.repeat(p[None], 3, axis=0) for p in planes]
            else:
                rasters, label = _dense_sample(spec, rng, sig)
            for m, img in zip(mods, rasters):
                if spec.noise_sigma > 0:
                    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
                write_raster(root / split / m / f"{sid}.tns", img)
            write_label(root / split / "labels" / f"{sid}.lbl", _with_border(label))
    (root / "manifest.txt").write_text(manifest.to_text())
    return Dataset(root)
