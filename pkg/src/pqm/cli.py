"""Command-line surface: thin composition over the library modules.

Subcommands: train, assess, eval, stats, pqm-gt, tile. Every rejected
precondition exits nonzero with the error on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from pqm.core import derive_quality_map
from pqm.data import (
    dataset_stats,
    format_dataset_stats,
    load_image,
    load_manifest,
    load_mask,
    load_quality_map,
    load_samples,
    save_image,
    save_mask,
    save_quality_map,
    tile_dataset,
)
from pqm.metrics import assessment_report, format_report
from pqm.model import build_model, load_checkpoint, save_checkpoint
from pqm.training import (
    assess,
    parse_training_config,
    split_samples,
    train_loop,
    SplitDataset,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=Path, help="dataset manifest path")
    parser.add_argument("--config", type=Path, help="training config path")
    parser.add_argument("--gt", type=Path, help="reference raster path")
    parser.add_argument("--pred", type=Path, help="prediction / unchecked raster path")
    parser.add_argument("--image", type=Path, help="image raster path")
    parser.add_argument("--out", type=Path, help="output path")
    parser.add_argument("--tile", type=int, help="tile edge length in pixels")
    parser.add_argument("--drop-empty", action="store_true", help="drop all-background tiles")
    parser.add_argument("--k", type=int, default=3, help="edge buffer radius in pixels")
    parser.add_argument("--seed", type=int, default=None, help="run seed override")
    parser.add_argument("--checkpoint", type=Path, help="model checkpoint path")


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise ValueError(f"missing required flags: {', '.join(missing)}")


def cmd_pqm_gt(args) -> int:
    _require(args, "gt", "pred", "out")
    gt = load_mask(args.gt)
    pred = load_mask(args.pred)
    save_quality_map(args.out, derive_quality_map(gt, pred))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "gt", "pred")
    pred_q = load_quality_map(args.pred)
    gt_q = load_quality_map(args.gt)
    report = assessment_report(pred_q, gt_q)
    print(format_report(report))
    print(f"mF1={report.mf1:.2f}")
    print(f"mIoU={report.miou:.2f}")
    return 0


def cmd_stats(args) -> int:
    _require(args, "manifest")
    samples = load_samples(load_manifest(args.manifest))
    print(format_dataset_stats(dataset_stats(samples, k=args.k)))
    return 0


def cmd_tile(args) -> int:
    _require(args, "image", "gt", "tile", "out")
    image = load_image(args.image)
    gt = load_mask(args.gt)
    unchecked = load_mask(args.pred) if args.pred else None
    tiles = tile_dataset(
        image, gt, tile=args.tile, unchecked=unchecked, drop_empty=args.drop_empty
    )
    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in tiles:
        save_image(out_dir / f"{t.id}_image.png", t.image)
        save_mask(out_dir / f"{t.id}_gt.png", t.gt_mask)
        unc_field = "-"
        if t.unchecked is not None:
            save_mask(out_dir / f"{t.id}_unchecked.png", t.unchecked)
            unc_field = f"{t.id}_unchecked.png"
        lines.append(f"{t.id}\t{t.id}_image.png\t{unc_field}\t{t.id}_gt.png")
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(tiles)} tiles to {out_dir}")
    return 0


def cmd_assess(args) -> int:
    _require(args, "image", "pred", "checkpoint", "out")
    model, _ = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    unchecked = load_mask(args.pred)
    quality, edges = assess(model, image, unchecked)
    save_quality_map(args.out, quality)
    edge_path = args.out.with_suffix(".edges.png")
    save_mask(edge_path, edges)
    print(f"wrote {args.out} and {edge_path}")
    return 0


def cmd_train(args) -> int:
    _require(args, "manifest", "config", "out")
    setup = parse_training_config(yaml.safe_load(args.config.read_text()) or {})
    if args.seed is not None:
        from dataclasses import replace

        setup.trainer_cfg = replace(setup.trainer_cfg, seed=args.seed)
    samples = load_samples(load_manifest(args.manifest))
    if setup.val_manifest:
        val_path = Path(setup.val_manifest)
        if not val_path.is_absolute():
            val_path = args.config.parent / val_path
        val_samples = load_samples(load_manifest(val_path))
        dataset = SplitDataset(train=list(samples), val=val_samples)
    else:
        dataset = split_samples(samples, setup.val_fraction)
    model = build_model(setup.model_cfg, seed=setup.trainer_cfg.seed)
    loss_log: list[str] = []
    epoch_log: list[str] = []
    result = train_loop(
        model,
        dataset,
        setup.trainer_cfg,
        pool=setup.pool,
        sources=setup.sources,
        weights=setup.weights,
        loss_log=loss_log,
        epoch_log=epoch_log,
    )
    save_checkpoint(
        args.out, model, step=result.steps,
        extra={"best_metric": result.best_metric, "best_epoch": result.best_epoch},
    )
    header = "step\tce\tedge\tpos\tneg\tseg\ttotal"
    args.out.with_suffix(".losses.tsv").write_text("\n".join([header, *loss_log]) + "\n")
    args.out.with_suffix(".metrics.tsv").write_text(
        "\n".join(["epoch\tmetric", *epoch_log]) + "\n"
    )
    print(
        f"trained {result.epochs_run} epochs ({result.steps} steps); "
        f"best {setup.trainer_cfg.monitor}={result.best_metric:.2f} at epoch {result.best_epoch}; "
        f"wrote {args.out}"
    )
    return 0


_COMMANDS = {
    "train": cmd_train,
    "assess": cmd_assess,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "pqm-gt": cmd_pqm_gt,
    "tile": cmd_tile,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqm",
        description="Four-class quality mapping of binary segmentation masks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model from a manifest and a config",
        "assess": "predict quality and edge maps for an image/mask pair",
        "eval": "score a predicted quality map against a reference one",
        "stats": "dataset statistics (class balance, EIB@k, mask mIoU)",
        "pqm-gt": "derive a ground-truth quality map from a mask pair",
        "tile": "cut a large raster into non-overlapping tiles",
    }
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        _add_common(p)
        p.set_defaults(handler=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
