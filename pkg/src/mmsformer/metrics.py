"""Confusion-matrix segmentation metrics and the IoU report emitter."""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255


class UndefinedMetricError(DataError):
    pass


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {truth.shape} differ in extent")
        K = self.num_classes
        valid = truth != ignore_index
        _check_range(truth, valid & ((truth < 0) | (truth >= K)), "ground truth", K)
        _check_range(pred, valid & ((pred < 0) | (pred >= K)), "prediction", K)
        idx = truth[valid].astype(np.int64) * K + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=K * K).reshape(K, K)
        return self


def _check_range(values: np.ndarray, bad: np.ndarray, what: str, K: int) -> None:
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"{what} class {int(values[pos])} at pixel {pos} is outside [0, {K})")


def accumulate(cm: ConfusionMatrix, pred, truth, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return cm.accumulate(pred, truth, ignore_index)


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    """IoU per class; ``None`` where the class never occurs in truth or prediction."""
    c = cm.counts
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    return [float(i) / float(u) if u > 0 else None for i, u in zip(inter, union)]


def miou(cm: ConfusionMatrix) -> float:
    ious = [v for v in per_class_iou(cm) if v is not None]
    if not ious:
        raise UndefinedMetricError("mIoU undefined: no class occurs in truth or prediction")
    return float(sum(ious) / len(ious))


def iou_records(ious: Sequence[float | None], class_names: Sequence[str], **extra) -> list[dict]:
    """One record per class plus a final ``mean`` record, IoU in percent."""
    recs = []
    for name, v in zip(class_names, ious):
        recs.append({**extra, "class": name, "iou": None if v is None else round(100 * v, 2)})
    defined = [v for v in ious if v is not None]
    mean = round(100 * sum(defined) / len(defined), 2) if defined else None
    recs.append({**extra, "class": "mean", "iou": mean})
    return recs


def format_iou_table(rows: dict[str, Sequence[float | None]], class_names: Sequence[str]) -> str:
    """Column-aligned table: one row per label (e.g. modality set), one column per class plus Mean."""
    header = ["", *class_names, "Mean"]
    body = []
    for label, ious in rows.items():
        defined = [v for v in ious if v is not None]
        cells = ["-" if v is None else f"{100 * v:.1f}" for v in ious]
        cells.append(f"{100 * sum(defined) / len(defined):.1f}" if defined else "-")
        body.append([label, *cells])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join(fmt(r) for r in [header, *body])


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=False) + "\n")


def read_records(path) -> list[dict]:
    """Parse a line-delimited record file written by any report emitter."""
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: not a valid record: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{n}: record must be an object")
            out.append(rec)
    return out
