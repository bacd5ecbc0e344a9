"""Multi-seed ablation and modality-subset experiments with report emitters."""
from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .config import VARIANTS, ModelConfig, TrainConfig
from .cost import count_params
from .metrics import miou, per_class_iou
from .model import build
from .training import train

log = logging.getLogger(__name__)

Progress = Callable[[str], None]


@dataclass
class SeedRun:
    seed: int
    miou: float
    ious: list[float | None]


def train_seeds(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds: Sequence[int],
                modalities: Sequence[str] | None = None, progress: Progress | None = None,
                label: str = "") -> list[SeedRun]:
    """Train one fresh model per seed (model init and shuffling both follow the seed)."""
    runs = []
    for s in seeds:
        mcfg = model_cfg.replace(seed=s)
        tcfg = TrainConfig(**{**train_cfg.__dict__, "seed": s})
        model = build(mcfg)
        res = train(model, dataset, tcfg, modalities=modalities, eval_every=tcfg.total_epochs)
        runs.append(SeedRun(s, res.final_miou, per_class_iou(res.final_cm)))
        if progress:
            progress(f"{label} seed={s} mIoU={res.final_miou:.4f}")
    return runs


def _median(xs: Sequence[float]) -> float:
    return float(statistics.median(xs))


# -- ablation -----------------------------------------------------------------
@dataclass
class AblationRow:
    variant: str
    params: int
    runs: list[SeedRun]

    @property
    def miou(self) -> float:
        return _median([r.miou for r in self.runs])


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def records(self) -> list[dict]:
        full = self.row("full").miou if any(r.variant == "full" for r in self.rows) else None
        out = []
        for r in self.rows:
            out.append({
                "variant": r.variant,
                "params": r.params,
                "mIoU": round(100 * r.miou, 2),
                "delta": None if full is None else round(100 * (r.miou - full), 2),
                "seeds": [x.seed for x in r.runs],
                "per_seed_mIoU": [round(100 * x.miou, 2) for x in r.runs],
            })
        return out

    def to_text(self) -> str:
        lines = [f"{'structure':<22} {'params':>9} {'mIoU':>7} {'change':>8}  per-seed"]
        for rec in self.records():
            d = "" if rec["variant"] == "full" or rec["delta"] is None else f"({rec['delta']:+.2f})"
            seeds = " ".join(f"{v:.1f}" for v in rec["per_seed_mIoU"])
            lines.append(f"{rec['variant']:<22} {rec['params']:>9} {rec['mIoU']:>7.2f} {d:>8}  {seeds}")
        return "\n".join(lines)

    def check(self) -> list[str]:
        """Ordering violations (full must match or beat linear_only and no_parallel_convs)."""
        failures = []
        full = self.row("full")
        for v in ("linear_only", "no_parallel_convs"):
            other = self.row(v)
            if full.miou < other.miou:
                failures.append(
                    f"full median {full.miou:.4f} < {v} median {other.miou:.4f} "
                    f"(full per-seed {[round(r.miou, 4) for r in full.runs]}, "
                    f"{v} per-seed {[round(r.miou, 4) for r in other.runs]})"
                )
        return failures


def run_ablation(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                 variants: Sequence[str] = VARIANTS, modalities: Sequence[str] | None = None,
                 progress: Progress | None = None) -> AblationReport:
    rows = []
    for v in variants:
        cfg = model_cfg.replace(variant=v)
        runs = train_seeds(dataset, cfg, train_cfg, seeds, modalities, progress, label=v)
        rows.append(AblationRow(v, count_params(cfg).params, runs))
    return AblationReport(rows)


# -- nested modality subsets --------------------------------------------------
@dataclass
class ModalityRow:
    modalities: list[str]
    runs: list[SeedRun]

    @property
    def miou(self) -> float:
        return _median([r.miou for r in self.runs])

    def class_iou(self, c: int) -> float | None:
        vals = [r.ious[c] for r in self.runs if r.ious[c] is not None]
        return _median(vals) if vals else None


@dataclass
class ModalityReport:
    rows: list[ModalityRow]
    class_names: list[str] = field(default_factory=list)

    def label(self, row: ModalityRow) -> str:
        return " & ".join(row.modalities)

    def class_gain(self, c: int, step: int) -> float:
        """Median over seeds of the IoU change of class ``c`` between rows ``step-1`` and ``step``."""
        a, b = self.rows[step - 1].runs, self.rows[step].runs
        diffs = [(y.ious[c] or 0.0) - (x.ious[c] or 0.0) for x, y in zip(a, b)]
        return _median(diffs)

    def records(self) -> list[dict]:
        out = []
        for row in self.rows:
            rec = {"modalities": row.modalities, "mIoU": round(100 * row.miou, 2),
                   "per_seed_mIoU": [round(100 * r.miou, 2) for r in row.runs]}
            for c, name in enumerate(self.class_names):
                v = row.class_iou(c)
                rec[name] = None if v is None else round(100 * v, 2)
            out.append(rec)
        return out

    def to_text(self) -> str:
        from .metrics import format_iou_table

        table = {self.label(r): [r.class_iou(c) for c in range(len(self.class_names))] for r in self.rows}
        return format_iou_table(table, self.class_names)

    def check(self, min_miou_gain: float | None = None, class_owner: dict[int, int] | None = None,
              min_class_gain: float = 0.10) -> list[str]:
        """Threshold violations.

        ``min_miou_gain``: required mIoU(2 modalities) - mIoU(1 modality).
        ``class_owner``: class index -> index of the modality that carries it;
        each such class must gain ``min_class_gain`` when that modality joins.
        """
        failures = []
        if min_miou_gain is not None and len(self.rows) >= 2:
            gain = self.rows[1].miou - self.rows[0].miou
            if gain < min_miou_gain:
                failures.append(f"two-modality gain {gain:.4f} < {min_miou_gain} "
                                f"(per-seed {[round(r.miou, 4) for r in self.rows[0].runs]} -> "
                                f"{[round(r.miou, 4) for r in self.rows[1].runs]})")
        for c, j in (class_owner or {}).items():
            if 1 <= j < len(self.rows):
                g = self.class_gain(c, j)
                if g < min_class_gain:
                    failures.append(f"class {c} gains {g:.4f} < {min_class_gain} when modality {j} is added")
        return failures


def run_modalities(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                   modalities: Sequence[str] | None = None, progress: Progress | None = None) -> ModalityReport:
    mods = dataset.resolve_modalities(modalities)
    rows = []
    for k in range(1, len(mods) + 1):
        subset = mods[:k]
        cfg = model_cfg.replace(num_modalities=k)
        rows.append(ModalityRow(subset, train_seeds(dataset, cfg, train_cfg, seeds, subset, progress,
                                                    label="+".join(subset))))
    return ModalityReport(rows, list(dataset.classes))


def per_class_owner(num_classes: int, num_modalities: int) -> dict[int, int]:
    """Class -> carrying modality for the ``per_class_modality`` synthetic layout."""
    return {c: (c - 1) % num_modalities for c in range(1, num_classes)}
