"""Command-line entry point: train / eval / ablate / modalities / cost / gradcheck / synth.

Configuration is a flat ``key = value`` file with ``model.*``, ``train.*``,
``synth.*`` and ``seeds`` keys; ``--set key=value`` overrides are applied after
the file, last one wins. The effective configuration is written to
``<out>/config.txt`` and reproduces the run when passed back via ``--config``.

Exit codes: 0 success, 2 configuration or data error, 3 numeric failure,
4 acceptance threshold missed under ``--check``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .config import ModelConfig, TrainConfig, dump_kv, from_flat, read_kv, to_flat
from .cost import count_flops, count_params, published_comparison
from .data import Dataset, SynthSpec, generate_synthetic
from .errors import MMSFormerError, NumericError
from .metrics import format_iou_table, iou_records, miou, per_class_iou, write_records

log = logging.getLogger("mmsformer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
XOR_MIN_GAIN = 0.25
CLASS_MIN_GAIN = 0.10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            from .errors import ConfigError

            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def explicit_settings(args) -> dict[str, str]:
    """Config file <- flag sugar <- --set, without defaults."""
    explicit: dict[str, str] = {}
    if args.config:
        explicit.update(read_kv(args.config))
    if getattr(args, "variant", None):
        explicit["model.variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        explicit["model.seed"] = explicit["train.seed"] = explicit["synth.seed"] = str(args.seed)
        if "seeds" not in explicit:
            explicit["seeds"] = ",".join(str(args.seed + i) for i in range(3))
    explicit.update(parse_overrides(getattr(args, "set", None)))
    return explicit


def effective_flat(args, dataset: Dataset | None = None, modalities=None) -> dict[str, str]:
    """Defaults <- explicit settings, then dataset-derived arity where not given."""
    flat = to_flat(RunConfig())
    explicit = explicit_settings(args)
    if dataset is not None:
        explicit.setdefault("model.decoder.num_classes", str(dataset.num_classes))
        explicit.setdefault("model.num_modalities", str(len(modalities or dataset.modalities)))
    flat.update(explicit)
    return flat


def load_run_config(flat: dict[str, str]) -> RunConfig:
    return from_flat(RunConfig, flat)


def resolve_config(config=None, overrides=(), dataset: Dataset | None = None, modalities=None) -> RunConfig:
    """The configuration a subcommand would see for ``--config config --set ...``."""
    args = argparse.Namespace(config=config, set=list(overrides), seed=None, variant=None)
    return load_run_config(effective_flat(args, dataset, modalities))


def _prepare(args, need_dataset=True):
    dataset = Dataset(args.dataset) if need_dataset else None
    mods = None
    if dataset is not None and args.modalities:
        mods = dataset.resolve_modalities([m for m in args.modalities.split(",") if m])
    flat = effective_flat(args, dataset, mods)
    cfg = load_run_config(flat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_kv(flat))
    return cfg, dataset, mods, out


# -- subcommands ----------------------------------------------------------------
def cmd_train(args) -> int:
    from .model import build
    from .training import train

    cfg, ds, mods, out = _prepare(args)
    model = build(cfg.model)
    log.info("%s", model.summary())
    res = train(model, ds, cfg.train, modalities=mods, out_dir=out, eval_every=args.eval_every)
    recs = iou_records(per_class_iou(res.final_cm), ds.classes, split="val", step=res.steps)
    write_records(out / "eval.jsonl", recs)
    log.info("final val mIoU %.4f (best %.4f)", res.final_miou, res.best_miou)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .training import evaluate

    model, step = load_checkpoint(args.checkpoint)
    ds = Dataset(args.dataset)
    mods = ds.resolve_modalities([m for m in args.modalities.split(",") if m] if args.modalities else
                                 ds.modalities[:model.config.num_modalities])
    cm = evaluate(model, ds.load_split(args.split, mods), ds.num_classes)
    ious = per_class_iou(cm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "eval.jsonl", iou_records(ious, ds.classes, split=args.split, step=step))
    print(format_iou_table({"+".join(mods): ious}, ds.classes), file=sys.stderr)
    log.info("mIoU %.4f", miou(cm))
    return EXIT_OK


def _progress(msg: str) -> None:
    log.info("%s", msg)


def cmd_ablate(args) -> int:
    from .experiments import run_ablation

    cfg, ds, mods, out = _prepare(args)
    report = run_ablation(ds, cfg.model, cfg.train, cfg.seeds, modalities=mods, progress=_progress)
    write_records(out / "ablation.jsonl", report.records())
    (out / "ablation.txt").write_text(report.to_text() + "\n")
    print(report.to_text(), file=sys.stderr)
    if args.check:
        failures = report.check()
        for f in failures:
            log.error("check failed: %s", f)
        if failures:
            return EXIT_CHECK
    return EXIT_OK


def cmd_modalities(args) -> int:
    from .experiments import per_class_owner, run_modalities

    cfg, ds, mods, out = _prepare(args)
    if len(mods or ds.modalities) < 2:
        from .errors import ConfigError

        raise ConfigError("modality-subset experiment needs at least 2 modalities")
    report = run_modalities(ds, cfg.model, cfg.train, cfg.seeds, modalities=mods, progress=_progress)
    write_records(out / "modalities.jsonl", report.records())
    (out / "modalities.txt").write_text(report.to_text() + "\n")
    print(report.to_text(), file=sys.stderr)
    if args.check:
        source = ds.manifest.source
        if source == "synthetic:xor_fusion":
            failures = report.check(min_miou_gain=XOR_MIN_GAIN)
        elif source == "synthetic:per_class_modality":
            owner = per_class_owner(ds.num_classes, len(mods or ds.modalities))
            failures = report.check(class_owner=owner, min_class_gain=CLASS_MIN_GAIN)
        else:
            log.warning("no thresholds defined for dataset source %r; nothing to check", source)
            failures = []
        for f in failures:
            log.error("check failed: %s", f)
        if failures:
            return EXIT_CHECK
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg, _, _, out = _prepare(args, need_dataset=False)
    model_cfg = cfg.model
    if args.full_scale:
        model_cfg = full_scale_variant(cfg.model, int(explicit_settings(args).get("model.num_modalities", 4)))
    rep = count_flops(model_cfg, (3, args.extent, args.extent)) if args.extent else count_params(model_cfg)
    write_records(out / "cost.jsonl", rep.records())
    text = rep.to_text(max_depth=args.depth)
    (out / "cost.txt").write_text(text + "\n")
    print(text, file=sys.stderr)
    if args.full_scale:
        cmp = published_comparison(model_cfg, args.extent or 512)
        write_records(out / "fusion_reference.jsonl", [cmp])
        print(json.dumps(cmp, indent=1), file=sys.stderr)
    return EXIT_OK


def full_scale_variant(model_cfg: ModelConfig, num_modalities: int) -> ModelConfig:
    """Published-width preset carrying over the fusion settings and variant of ``model_cfg``."""
    from .config import full_scale_config

    cfg = full_scale_config(num_modalities=num_modalities)
    cfg.fusion = dataclasses.replace(model_cfg.fusion)
    cfg.variant = model_cfg.variant
    cfg.apply_variant()
    cfg.validate()
    return cfg


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    _, _, _, out = _prepare(args, need_dataset=False)
    seeds = range(args.seeds)
    ops = [o for o in args.ops.split(",") if o] if args.ops else None
    recs = run_suite("float64", seeds, ops) + run_suite("float32", seeds, ops)
    if not recs:
        from .errors import ConfigError

        raise ConfigError(f"no gradient cases match --ops {args.ops!r}")
    write_records(out / "gradcheck.jsonl", recs)
    bad = [r for r in recs if not r["ok"]]
    for r in recs:
        log.info("%-18s %s seed=%d rel_err=%.2e %s", r["op"], r["dtype"], r["seed"], r["rel_err"],
                 "ok" if r["ok"] else "FAIL")
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_synth(args) -> int:
    cfg, _, _, out = _prepare(args, need_dataset=False)
    ds = generate_synthetic(out, cfg.synth)
    log.info("wrote %s dataset to %s (%d train ids)", cfg.synth.mode, out, len(ds.ids("train")))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "modalities": cmd_modalities,
    "cost": cmd_cost, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsformer", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="sets model, train and synth seeds (seeds list = seed..seed+2)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset root containing manifest.txt")
            sp.add_argument("--modalities", help="comma-separated modality subset, in order")
            sp.add_argument("--variant", help="fusion variant (shorthand for --set model.variant=...)")

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--eval-every", type=int, default=1)
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--modalities")
    sp.add_argument("--out", required=True)
    sp.add_argument("-v", "--verbose", action="store_true")
    for name, hlp in (("ablate", "train all five fusion variants"),
                      ("modalities", "train nested modality subsets")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--check", action="store_true", help="exit 4 if the expected ordering/gain is missed")
    sp = sub.add_parser("cost", help="parameter / FLOP report")
    common(sp, dataset=False)
    sp.add_argument("--extent", type=int, default=64, help="square input extent; 0 for parameters only")
    sp.add_argument("--depth", type=int, default=None, help="limit report depth")
    sp.add_argument("--full-scale", action="store_true", help="use the published-width preset")
    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(sp, dataset=False)
    sp.add_argument("--seeds", type=int, default=1, help="seeds per op")
    sp.add_argument("--ops", help="comma-separated subset of case names")
    sp = sub.add_parser("synth", help="generate a synthetic dataset into --out")
    common(sp, dataset=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (MMSFormerError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
