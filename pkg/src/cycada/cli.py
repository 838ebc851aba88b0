"""Operator-facing command surface for preparation, staged training, ablations,
evaluation, and report generation.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training abort, 5 report
error. Every run writes its resolved configuration snapshot into the output
directory before doing any work, so results replay from the snapshot alone.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import config as cfg
from .data import SHIFTS, load_prepared_shift, prepare_digits
from .errors import ConfigError, CycadaError, DataError
from .eval import classify_accuracy, write_metrics
from .models import (
    build_feature_discriminator,
    build_generator,
    build_image_discriminator,
    build_task_net,
    load_checkpoint,
    save_checkpoint,
)
from .report import collect_bundle, emit_report, save_confusion_heatmap
from .trainer import (
    STAGE_FEATURE,
    STAGE_PIXEL,
    STAGE_SOURCE,
    STAGE_TASK,
    cycle_reconstruction_error,
    feature_adapt,
    pixel_adapt,
    pretrain_source,
    run_experiment,
    seed_mix,
    train_task_on_translated,
    translate_dataset,
)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="experiment config YAML")
    group.add_argument("--preset", help="name of a shipped preset (see list-presets)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override; applies after the file")


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="run seed")
    parser.add_argument("--run-dir", default=None,
                        help="run directory (default {out_root}/{experiment}/seed-{seed})")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cycada",
        description="Cycle-consistent adversarial domain adaptation toolkit",
    )
    parser.add_argument("--torch-threads", type=int, default=1,
                        help="torch intra-op threads (1 is fastest for desk-scale nets)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare-data", help="canonicalize raw digit archives into IDX pairs")
    p.add_argument("--shift", required=True, choices=SHIFTS)
    p.add_argument("--raw-root", default=None, help="default: $CYCADA_DATA_ROOT/raw")
    p.add_argument("--out", default=None, help="default: $CYCADA_DATA_ROOT/prepared")

    for verb, helptext in (
        ("train-source", "stage 1: train the source task net"),
        ("adapt-pixel", "stage 2: pixel-level cycle-consistent adaptation"),
        ("train-task", "stage 3: train the task net on translated source images"),
        ("adapt-feat", "stage 4: gated feature-level adaptation"),
    ):
        p = sub.add_parser(verb, help=helptext)
        _add_config_args(p)
        _add_run_args(p)

    p = sub.add_parser("run-experiment", help="run the full stage list over all seeds")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="override seed list")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="accuracy + confusion of a checkpoint on a test split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target-test",
                   choices=["source-test", "source-train", "target-test", "target-train"])
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="tables and figures from completed experiments")
    p.add_argument("--from", dest="sources", nargs="+", required=True,
                   help="experiment output directories")
    p.add_argument("--out", default=None, help="default: first source dir /report")
    p.add_argument("--formats", nargs="+",
                   default=["markdown-table", "csv", "image-grid"],
                   choices=["markdown-table", "csv", "image-grid"])

    sub.add_parser("list-presets", help="names of the shipped preset configs")
    return parser


def _load_resolved(args) -> dict:
    if args.preset:
        file_config = cfg.load_preset(args.preset)
    else:
        file_config = cfg.load_config_file(args.config)
    resolved = cfg.resolve_config(file_config, args.override)
    cfg.validate_config(resolved)
    return resolved


def _claim_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(
            f"output directory {path} is not empty; re-running is refused unless --force"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_dir(args, resolved: dict) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return Path(resolved["out_root"]) / resolved["experiment"] / f"seed-{args.seed}"


def _load_stage_domains(resolved: dict):
    from .trainer import _load_domains

    return _load_domains(dict(resolved["dataset"], **(
        {"prepared_root": str(cfg.data_root() / "prepared")}
        if resolved["dataset"].get("kind") == "digits"
        and "prepared_root" not in resolved["dataset"] else {})))


def _cmd_prepare_data(args) -> int:
    raw_root = Path(args.raw_root) if args.raw_root else cfg.data_root() / "raw"
    out = Path(args.out) if args.out else cfg.data_root() / "prepared"
    prepared = prepare_digits(raw_root, args.shift, out)
    for domain in (prepared.source, prepared.target):
        for split in (domain.train, domain.test):
            d = split.descriptor
            print(f"{d.name}/{d.split}: {d.count} items, shape {d.image_shape}, "
                  f"sha256 {d.sha256[:12]}...")
    print(f"wrote {prepared.out_dir}")
    return 0


def _cmd_train_source(args) -> int:
    resolved = _load_resolved(args)
    source, target = _load_stage_domains(resolved)
    run_dir = _run_dir(args, resolved)
    stage_dir = _claim_dir(run_dir / STAGE_SOURCE, args.force)
    cfg.write_snapshot(resolved, stage_dir)
    stage = cfg.single_stage_config(resolved, STAGE_SOURCE, args.seed)
    domain = source if stage.train_domain == "source" else target
    shape = domain.train.descriptor.image_shape
    handle = build_task_net(shape, domain.train.descriptor.num_classes,
                            seed=seed_mix(args.seed, 0, 1))
    handle = pretrain_source(stage, handle, domain.train, out_dir=stage_dir)
    save_checkpoint(handle, stage_dir / "checkpoint" / "task-net.ckpt")
    acc, cm = classify_accuracy(handle, target.test)
    write_metrics(stage_dir / "metrics.json", accuracy=acc, cm=cm)
    print(f"target-test accuracy {acc:.4f}; outputs in {stage_dir}")
    return 0


def _cmd_adapt_pixel(args) -> int:
    resolved = _load_resolved(args)
    source, target = _load_stage_domains(resolved)
    run_dir = _run_dir(args, resolved)
    source_ckpt = run_dir / STAGE_SOURCE / "checkpoint" / "task-net.ckpt"
    if not source_ckpt.exists():
        raise DataError(f"missing source checkpoint {source_ckpt}; run train-source first")
    stage_dir = _claim_dir(run_dir / STAGE_PIXEL, args.force)
    cfg.write_snapshot(resolved, stage_dir)
    stage = cfg.single_stage_config(resolved, STAGE_PIXEL, args.seed)
    f_ref = load_checkpoint(source_ckpt).freeze()
    shape = source.train.descriptor.image_shape
    channels, image_size = shape[0], shape[1]
    g_st = build_generator(channels, image_size, base_width=stage.generator_width,
                           seed=seed_mix(args.seed, 1, 1))
    g_ts = build_generator(channels, image_size, base_width=stage.generator_width,
                           seed=seed_mix(args.seed, 1, 2))
    d_s = build_image_discriminator(channels, base_width=stage.discriminator_width,
                                    image_size=image_size, seed=seed_mix(args.seed, 1, 3))
    d_t = build_image_discriminator(channels, base_width=stage.discriminator_width,
                                    image_size=image_size, seed=seed_mix(args.seed, 1, 4))
    g_st, g_ts, d_s, d_t = pixel_adapt(stage, f_ref, g_st, g_ts, d_s, d_t,
                                       source.train, target.train, out_dir=stage_dir)
    for name, handle in (("g-st", g_st), ("g-ts", g_ts), ("d-s", d_s), ("d-t", d_t)):
        save_checkpoint(handle, stage_dir / "checkpoint" / f"{name}.ckpt")
    recon = cycle_reconstruction_error(g_st, g_ts, source.train)
    print(f"cycle reconstruction error {recon:.4f}; outputs in {stage_dir}")
    return 0


def _cmd_train_task(args) -> int:
    resolved = _load_resolved(args)
    source, target = _load_stage_domains(resolved)
    run_dir = _run_dir(args, resolved)
    gen_ckpt = run_dir / STAGE_PIXEL / "checkpoint" / "g-st.ckpt"
    if not gen_ckpt.exists():
        raise DataError(f"missing generator checkpoint {gen_ckpt}; run adapt-pixel first")
    stage_dir = _claim_dir(run_dir / STAGE_TASK, args.force)
    cfg.write_snapshot(resolved, stage_dir)
    stage = cfg.single_stage_config(resolved, STAGE_TASK, args.seed)
    g_st = load_checkpoint(gen_ckpt).freeze()
    shape = source.train.descriptor.image_shape
    handle = build_task_net(shape, source.train.descriptor.num_classes,
                            seed=seed_mix(args.seed, 2, 1))
    handle = train_task_on_translated(stage, handle, g_st, source.train,
                                      cache_dir=stage_dir / "cache", out_dir=stage_dir)
    save_checkpoint(handle, stage_dir / "checkpoint" / "task-net.ckpt")
    acc, cm = classify_accuracy(handle, target.test)
    write_metrics(stage_dir / "metrics.json", accuracy=acc, cm=cm)
    print(f"target-test accuracy {acc:.4f}; outputs in {stage_dir}")
    return 0


def _cmd_adapt_feat(args) -> int:
    resolved = _load_resolved(args)
    source, target = _load_stage_domains(resolved)
    run_dir = _run_dir(args, resolved)
    task_ckpt = run_dir / STAGE_TASK / "checkpoint" / "task-net.ckpt"
    gen_ckpt = run_dir / STAGE_PIXEL / "checkpoint" / "g-st.ckpt"
    for needed in (task_ckpt, gen_ckpt):
        if not needed.exists():
            raise DataError(f"missing checkpoint {needed}; run earlier stages first")
    stage_dir = _claim_dir(run_dir / STAGE_FEATURE, args.force)
    cfg.write_snapshot(resolved, stage_dir)
    stage = cfg.single_stage_config(resolved, STAGE_FEATURE, args.seed)
    f_t = load_checkpoint(task_ckpt)
    if stage.feature_reference == "source-pretrain":
        ref_ckpt = run_dir / STAGE_SOURCE / "checkpoint" / "task-net.ckpt"
        if not ref_ckpt.exists():
            raise DataError(f"missing checkpoint {ref_ckpt}; run train-source first")
        f_ref = load_checkpoint(ref_ckpt).freeze()
    else:
        f_ref = load_checkpoint(task_ckpt).freeze()
    g_st = load_checkpoint(gen_ckpt).freeze()
    translated = translate_dataset(g_st, source.train.images)
    d_feat = build_feature_discriminator(f_t.feature_dim, seed=seed_mix(args.seed, 3, 1))
    report: dict = {}
    f_t = feature_adapt(stage, f_t, f_ref, d_feat, translated, target.train,
                        out_dir=stage_dir, report=report)
    save_checkpoint(f_t, stage_dir / "checkpoint" / "task-net.ckpt")
    acc, cm = classify_accuracy(f_t, target.test)
    write_metrics(stage_dir / "metrics.json", accuracy=acc, cm=cm)
    print(f"target-test accuracy {acc:.4f} (stop: {report.get('stop_reason')}); "
          f"outputs in {stage_dir}")
    return 0


def _cmd_run_experiment(args) -> int:
    resolved = _load_resolved(args)
    if args.seeds is not None:
        resolved["seeds"] = list(args.seeds)
        cfg.validate_config(resolved)
    manifest = cfg.manifest_from_config(resolved)
    exp_dir = _claim_dir(Path(manifest.out_root) / manifest.experiment, args.force)
    cfg.write_snapshot(resolved, exp_dir)
    manifest = run_experiment(manifest)
    failures = [r for r in manifest.runs if r.get("error")]
    agg = manifest.aggregate or {}
    mean = agg.get("mean")
    stderr = agg.get("stderr")
    print(f"{manifest.experiment}: {agg.get('runs', 0)} completed runs"
          + (f", mean accuracy {mean:.4f}" if mean is not None else "")
          + (f" +/- {stderr:.4f}" if stderr is not None else ""))
    for failure in failures:
        print(f"  seed {failure['seed']} aborted: {failure['error']}", file=sys.stderr)
    if len(failures) == len(manifest.runs):
        raise CycadaError("every run aborted")
    return 0


def _cmd_evaluate(args) -> int:
    resolved = _load_resolved(args)
    source, target = _load_stage_domains(resolved)
    domain, split = args.split.split("-")
    dataset = getattr(source if domain == "source" else target, split)
    handle = load_checkpoint(args.checkpoint)
    out = _claim_dir(Path(args.out), args.force)
    cfg.write_snapshot(resolved, out)
    acc, cm = classify_accuracy(handle, dataset)
    write_metrics(out / "metrics.json", accuracy=acc, cm=cm)
    from .models import checkpoint_hash

    save_confusion_heatmap(out / "confusion.png", cm.counts,
                           caption=f"ckpt={checkpoint_hash(args.checkpoint)[:12]} "
                                   f"split={args.split}")
    print(f"{args.split} accuracy {acc:.4f}; metrics in {out}")
    return 0


def _cmd_report(args) -> int:
    bundle = collect_bundle(args.sources)
    out = Path(args.out) if args.out else Path(args.sources[0]) / "report"
    emitted = emit_report(bundle, out, formats=tuple(args.formats))
    for path in emitted:
        print(path)
    return 0


def _cmd_list_presets(_args) -> int:
    for name in cfg.preset_names():
        print(name)
    return 0


_COMMANDS = {
    "prepare-data": _cmd_prepare_data,
    "train-source": _cmd_train_source,
    "adapt-pixel": _cmd_adapt_pixel,
    "train-task": _cmd_train_task,
    "adapt-feat": _cmd_adapt_feat,
    "run-experiment": _cmd_run_experiment,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "list-presets": _cmd_list_presets,
}


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.torch_threads))
    try:
        return _COMMANDS[args.verb](args)
    except CycadaError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
