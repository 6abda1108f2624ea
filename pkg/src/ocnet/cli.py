"""Command line: ``ocnet {gen-data,train,eval,gradcheck,visualize}``.

Exit status is 0 on success, 1 when a command fails at run time and 2
for usage problems (bad flags, unreadable or invalid configuration,
unknown gradcheck selectors, query pixels outside the image).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, packaged_config
from .data import SegmentationSample, generate_shapes, load_dataset, read_ppm, save_dataset
from .engine import LOG_HEADER, Trainer, evaluate, load_model
from .errors import OcnetError
from .gradcheck import CHECKS, run_check
from .metrics import miou
from .visualize import check_points, query_maps, write_query_maps

log = logging.getLogger("ocnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# seeds of the built-in toy splits when no dataset directory is configured
TRAIN_SPLIT_SEED = 0
VAL_SPLIT_SEED = 1


class UsageError(Exception):
    pass


def _load(name: Optional[str]) -> RunConfig:
    # a bare name such as "toy" selects a configuration shipped with the package
    if name and not Path(name).exists() and "/" not in name and not name.endswith(".conf"):
        return load_config(packaged_config(name))
    return load_config(name)


def _config(args) -> RunConfig:
    cfg = _load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _split(cfg: RunConfig, which: str) -> list[SegmentationSample]:
    path = cfg.train_data if which == "train" else cfg.val_data
    if path:
        return load_dataset(path, cfg.num_classes)
    seed, count = (TRAIN_SPLIT_SEED, cfg.train_count) if which == "train" else (VAL_SPLIT_SEED, cfg.val_count)
    log.info("generating the built-in %s split (%d samples, seed %d)", which, count, seed)
    size = cfg.image_size
    return generate_shapes(seed, count, size, size, cfg.num_classes)


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load(args.config)
    seed = TRAIN_SPLIT_SEED if args.seed is None else args.seed
    count = cfg.train_count if args.count is None else args.count
    size = cfg.image_size if args.size is None else args.size
    samples = generate_shapes(seed, count, size, size, cfg.num_classes)
    manifest = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {manifest.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = _split(cfg, "train")
    val = _split(cfg, "val") if (cfg.val_data or cfg.val_count) else []
    trainer = Trainer(cfg, train, val)
    if args.resume:
        trainer.restore(load_checkpoint(args.resume))
        log.info("resumed at iteration %d", trainer.iteration)
    (out / "config.conf").write_text(cfg.to_text())
    with open(out / "log.tsv", "a" if args.resume else "w") as fh:
        if not args.resume:
            fh.write(LOG_HEADER + "\n")

        def emit(record):
            fh.write(record.line() + "\n")
            fh.flush()
            print(record.line(), flush=True)

        records = trainer.run(on_record=emit)
    save_checkpoint(out / "checkpoint.ocn", trainer.checkpoint())
    if records:
        print(f"final loss {records[-1].loss:.9g}")
    print(f"checkpoint {out / 'checkpoint.ocn'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    scales = tuple(args.scales) if args.scales else cfg.eval_scales
    flip = cfg.flip or args.flip
    model = load_model(cfg, load_checkpoint(args.checkpoint))
    samples = load_dataset(args.data, cfg.num_classes) if args.data else _split(cfg, "val")
    cm = evaluate(model, samples, cfg.num_classes, scales, flip, ignore_label=cfg.ignore_label)
    ious, mean, acc = miou(cm)
    for k, v in enumerate(ious):
        print(f"class {k}\tIoU {v:.4f}")
    print(f"mIoU {mean:.4f}")
    print(f"pixel accuracy {acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    selectors = sorted(CHECKS) if args.selector == ["all"] else args.selector
    unknown = [s for s in selectors if s not in CHECKS]
    if unknown:
        raise UsageError(f"unknown selector {', '.join(unknown)}; valid selectors: all, {', '.join(sorted(CHECKS))}")
    ok = True
    for selector in selectors:
        report = run_check(selector, seed=args.seed or 0)
        print("\n".join(report.lines()))
        ok &= report.passed
    return EXIT_OK if ok else EXIT_FAILURE


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return y, x


def cmd_visualize(args) -> int:
    cfg = _config(args)
    model = load_model(cfg, load_checkpoint(args.checkpoint))
    if args.image:
        pixels = read_ppm(args.image)
        sample = SegmentationSample(pixels, np.zeros(pixels.shape[:2], np.uint8))
    else:
        sample = generate_shapes(VAL_SPLIT_SEED, args.index + 1, cfg.image_size, cfg.image_size, cfg.num_classes)[-1]
    try:
        check_points(args.pixel, *sample.pixels.shape[:2])
    except OcnetError as exc:
        raise UsageError(str(exc)) from None
    maps = query_maps(model, sample.image, args.pixel)
    for path in write_query_maps(args.out, sample.pixels, maps):
        print(path)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file, or the name of a packaged config such as 'toy'")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ocnet", description="Object context segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic shapes split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="number of samples (default: train_count)")
    p.add_argument("--size", type=int, help="image side in pixels (default: image_size)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and save a checkpoint")
    p.add_argument("--out", required=True, help="run directory for checkpoint, log and config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="report IoU metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory or manifest (default: val_data or the built-in split)")
    p.add_argument("--scales", type=float, nargs="+", help="test scales, e.g. 0.75 1 1.25")
    p.add_argument("--flip", action="store_true", help="also average the mirrored image")
    p.add_argument("--out", help="unused; accepted for symmetry")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("selector", nargs="+", help=f"'all' or any of: {', '.join(sorted(CHECKS))}")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", parents=[common], help="export object context maps as PGM heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="PPM image (default: a built-in validation sample)")
    src.add_argument("--index", type=int, default=0, help="built-in validation sample index")
    p.add_argument("--pixel", type=_parse_pixel, action="append", required=True, help="query pixel as row,col")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ocnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OcnetError, OSError, ValueError) as exc:
        print(f"ocnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
