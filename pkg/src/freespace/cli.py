"""Command-line driver.

Subcommands: ``train``, ``eval``, ``ablate``, ``weights``,
``decoder-stats``, ``render``.  Exit codes: 0 on success, 2 on contract
errors, 3 on numerical aborts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from . import data as data_mod
from . import harness
from .decoder import build_topology, cost_report
from .errors import ContractError, NumericalAbort
from .geometry import CameraIntrinsics, DepthImage, PixelSet, camera_height, \
    depth_inconsistency_weights
from .losses import semantic_transition_weights

log = logging.getLogger("freespace")

LAMBDA_GRID = [("l_s=0.0,l_d=0.0", {"loss.lambda_s": 0.0, "loss.lambda_d": 0.0}),
               ("l_s=0.0,l_d=0.4", {"loss.lambda_s": 0.0, "loss.lambda_d": 0.4}),
               ("l_s=0.1,l_d=0.3", {"loss.lambda_s": 0.1, "loss.lambda_d": 0.3}),
               ("l_s=0.2,l_d=0.2", {"loss.lambda_s": 0.2, "loss.lambda_d": 0.2}),
               ("l_s=0.3,l_d=0.1", {"loss.lambda_s": 0.3, "loss.lambda_d": 0.1}),
               ("l_s=0.4,l_d=0.0", {"loss.lambda_s": 0.4, "loss.lambda_d": 0.0})]

HF2B_GRID = [("baseline-sum", {"fusion.baseline_sum": True}),
             ("sa+hfcd+awfr", {"ham.channel": False, "ham.atrous": False}),
             ("sa+ca+hfcd+awfr", {"ham.atrous": False}),
             ("full", {}),
             ("no-hfcd", {"hfcd.enabled": False}),
             ("no-awfr", {"awfr.enabled": False})]

RADIUS_GRID = [(f"radius={r}", {"loss.radius": r}) for r in (1, 3, 5, 7, 9, 11)]

DECODER_GRID = [(kind, {"decoder.kind": kind})
                for kind in ("roadsegv2", "unetpp", "unet3p")]

GRIDS = {"hf2b": HF2B_GRID, "lambda": LAMBDA_GRID, "radius": RADIUS_GRID,
         "decoder": DECODER_GRID}


def _mapping_from_args(args) -> dict:
    file_values = config_mod.read_config_file(args.config) if args.config else {}
    overrides = dict(config_mod.parse_override(o) for o in (args.ablation or []))
    mapping = config_mod.merged(file_values, overrides)
    if args.seed is not None:
        mapping["train.seed"] = args.seed
    return mapping


def _load_dataset_or_fail(root):
    if root is None:
        raise ContractError("--data-root is required")
    samples = data_mod.load_dataset(root)
    if not samples:
        raise ContractError(f"no complete samples under {root}")
    return samples


def cmd_train(args):
    mapping = _mapping_from_args(args)
    cfg = config_mod.train_config_from_mapping(mapping)
    dataset = _load_dataset_or_fail(args.data_root)
    record = harness.train(cfg, dataset, out_dir=args.out_dir)
    print(f"best epoch {record.best_epoch}: val Fsc {record.best_val_fsc:.4f}")
    if record.checkpoint_path:
        print(f"checkpoint: {record.checkpoint_path}")
    return 0


def cmd_eval(args):
    dataset = _load_dataset_or_fail(args.data_root)
    csv = Path(args.out_dir) / "per_frame.csv" if args.out_dir else None
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    report = harness.evaluate(args.checkpoint, dataset, per_frame_csv=csv)
    for key, value in report.items():
        print(f"{key:<7} {value:.4f}" if isinstance(value, float) else f"{key:<7} {value}")
    if args.out_dir:
        kv = "\n".join(f"{k}={v}" for k, v in report.items())
        (Path(args.out_dir) / "metrics.kv").write_text(kv + "\n")
    return 0


def cmd_ablate(args):
    mapping = _mapping_from_args(args)
    dataset = _load_dataset_or_fail(args.data_root)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    results = harness.ablate(GRIDS[args.grid], dataset, base_mapping=mapping,
                             seeds=seeds)
    table = harness.ablation_table(results)
    print(table)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{args.grid}.txt").write_text(table + "\n")
    return 0


def cmd_weights(args):
    labels = (np.asarray(Image.open(args.label).convert("L")) >= 128).astype(np.uint8)
    raw = np.asarray(Image.open(args.depth), dtype=np.float64)
    depth = DepthImage(np.where(raw > 0, raw / data_mod.DEPTH_SCALE, np.nan), raw > 0)
    intrinsics = CameraIntrinsics.from_text(args.calib)

    w_s = semantic_transition_weights(labels, args.radius)
    mask = (labels == 1) & depth.valid
    if mask.any():
        pixels = PixelSet.from_mask(mask)
        y_hat = camera_height(pixels, depth, intrinsics)
        w_d = depth_inconsistency_weights(pixels, depth, intrinsics, y_hat)
    else:
        log.warning("no labeled drivable pixels with valid depth; flat zero weights")
        w_d = np.zeros(labels.shape)

    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    for name, w in (("omega_s", w_s), ("omega_d", w_d)):
        Image.fromarray(np.round(255 * w).astype(np.uint8), mode="L").save(
            out / f"{name}.png")
        print(f"{name}: min {w.min():.4f} mean {w.mean():.4f} max {w.max():.4f}")
    return 0


def cmd_decoder_stats(args):
    channels = tuple(int(c) for c in args.channels.split(","))
    graph = build_topology(args.kind, args.levels, channels,
                           args.block if args.block else None)
    h, w = (int(v) for v in args.size.split("x"))
    report = cost_report(graph, (h, w))
    print(report.as_text())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        kv = [f"kind={args.kind}", f"levels={args.levels}",
              f"channels={','.join(map(str, channels))}",
              f"params={report.params}", f"macs={report.macs}"]
        (out / f"decoder_{args.kind}.kv").write_text("\n".join(kv) + "\n")
    return 0


def cmd_render(args):
    if args.out_dir is None:
        raise ContractError("--out-dir is required")
    maker = harness.make_hard_split if args.preset == "hard" else harness.make_plain_split
    samples = maker(args.count, seed=args.seed or 0, image_size=args.size)
    for i, sample in enumerate(samples):
        data_mod.save_sample(sample, args.out_dir, f"{i:06d}")
    print(f"wrote {len(samples)} frames to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freespace",
        description="Desk-scale freespace-detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data-root")
        p.add_argument("--out-dir")
        p.add_argument("--ablation", action="append", metavar="KEY=VALUE",
                       help="config override; repeatable")

    p = sub.add_parser("train", help="fit a model on a rendered dataset")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a predeclared experiment grid")
    common(p)
    p.add_argument("--grid", choices=sorted(GRIDS), required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("weights", help="emit per-pixel loss weight maps")
    p.add_argument("--label", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--radius", type=int, default=7)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("decoder-stats", help="analytic decoder cost report")
    p.add_argument("--kind", choices=("roadsegv2", "unetpp", "unet3p"),
                   default="roadsegv2")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--channels", default="16,32,64,128")
    p.add_argument("--block", default="", help="override the block kind")
    p.add_argument("--size", default="32x32", help="level-0 feature size HxW")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_decoder_stats)

    p = sub.add_parser("render", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--preset", choices=("plain", "hard"), default="plain")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
