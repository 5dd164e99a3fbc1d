"""Command-line entry point: ``binsplat <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time

import numpy as np

from . import io as bio
from ._validation import check_level, resolve_threads
from .codec import select_gaussians
from .exceptions import BinsplatError, FormatError, NumericError
from .rasterizer import render_class_map, render_features
from .scene import LevelLayout

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("binsplat")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _level(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"level must be an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"levels are 1-based, got {value}")
    return value


def _count(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _mask_paths(arg):
    """A directory of .bgm files or an explicit list."""
    if len(arg) == 1 and os.path.isdir(arg[0]):
        paths = sorted(glob.glob(os.path.join(arg[0], "*.bgm")))
        if not paths:
            raise FileNotFoundError(f"{arg[0]}: no .bgm files")
        return paths
    return list(arg)


def _write_manifest(path, entries):
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {v}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .synth import SynthSpec, generate
    from .trainer import parse_key_values

    mapping = {}
    if args.spec:
        with open(args.spec) as fh:
            mapping = parse_key_values(fh.read(), args.spec)
    if args.seed is not None:
        mapping["seed"] = args.seed
    spec = SynthSpec.from_mapping(mapping)
    scene, cameras, pyramid, truth = generate(spec)

    os.makedirs(args.out, exist_ok=True)
    bio.save_scene(scene, os.path.join(args.out, "scene.bgs"))
    bio.save_masks(pyramid, os.path.join(args.out, "masks"))
    bio.save_cameras(cameras, os.path.join(args.out, "cameras.txt"))
    _write_manifest(os.path.join(args.out, "manifest.txt"), {
        "seed": spec.seed, "gaussians": len(scene), "views": len(cameras),
        "layout": ",".join(map(str, scene.layout.level_dims)),
        "indivisible": sorted(truth.indivisible)})
    print(f"synth: {len(scene)} gaussians, {len(cameras)} views, seed {spec.seed} -> {args.out}")


def cmd_import_ply(args):
    layout = LevelLayout.parse(args.layout)
    scene = bio.import_ply(args.ply, layout)
    bio.save_scene(scene, args.out)
    print(f"import-ply: {len(scene)} gaussians -> {args.out}")


def cmd_train(args):
    from .trainer import Checkpoint, TrainConfig, resume, train, write_log

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    overrides["threads"] = resolve_threads(args.threads)
    config = TrainConfig(**{**config.__dict__, **overrides})

    scene = bio.load_scene(args.scene)
    pyramid = bio.load_masks(_mask_paths(args.masks), scene.layout)
    cameras = bio.load_cameras(args.cameras)
    ckpt = Checkpoint.load(args.resume) if args.resume else None

    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoints") if config.checkpoint_every else None
    if ckpt is None:
        result = train(scene, cameras, pyramid, config, checkpoint_dir=ckpt_dir)
    else:
        result = resume(ckpt, cameras, pyramid, config, checkpoint_dir=ckpt_dir)
    bio.save_scene(result.scene, os.path.join(args.out, "scene.bgs"))
    bio.save_codes(result.codes, os.path.join(args.out, "codes.bgc"))
    write_log(result.history, os.path.join(args.out, "train_log.csv"),
              scene.layout.n_levels, seed=config.seed)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(config.to_text())
    if result.skipped_views:
        log.warning("%d iterations skipped views without labels", result.skipped_views)
    last = result.history[-1]["total"] if result.history else float("nan")
    print(f"train: {config.iterations} iterations, seed {config.seed}, final loss {last:.6g}"
          f" -> {args.out}")


def cmd_render_class(args):
    scene = bio.load_scene(args.scene, allow_empty=True)
    codes = bio.load_codes(args.codes) if args.codes else None
    cameras = bio.load_cameras(args.cameras)
    if not 0 <= args.camera < len(cameras):
        raise ValueError(f"camera {args.camera} outside 0..{len(cameras) - 1}")
    level = check_level(args.level, scene.layout)
    labels = render_class_map(scene, cameras[args.camera], level, codes,
                              threads=resolve_threads(args.threads))
    bio.save_label_stack(labels, args.out)
    print(f"render-class: view {args.camera}, level {level}, "
          f"{len(np.unique(labels[labels != 0]))} classes -> {args.out}")


def cmd_extract_object(args):
    scene = bio.load_scene(args.scene)
    codes = bio.load_codes(args.codes)
    if len(codes) != len(scene):
        raise ValueError(f"{len(codes)} codes for {len(scene)} gaussians")
    level = check_level(args.level, codes.layout)
    idx = select_gaussians(codes, level, args.class_value)
    bio.save_scene(scene.subset(idx), args.out)
    print(f"extract-object: {len(idx)} gaussians with level-{level} class "
          f"{args.class_value} -> {args.out}")


def cmd_eval(args):
    from .synth import eval_miou

    preds = [bio.load_label_stack(p) for p in args.pred]
    truths = [bio.load_label_stack(p) for p in _mask_paths(args.truth)]
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truth views")
    pred_maps, truth_maps = [], []
    for p, t, name in zip(preds, truths, args.pred):
        if args.level > t.shape[0]:
            raise ValueError(f"level {args.level} outside 1..{t.shape[0]}")
        pred_maps.append(p[args.level - 1] if p.shape[0] > 1 else p[0])
        truth_maps.append(t[args.level - 1])
        if pred_maps[-1].shape != truth_maps[-1].shape:
            raise ValueError(f"{name}: size {pred_maps[-1].shape} differs from truth "
                             f"{truth_maps[-1].shape}")
    rep = eval_miou(pred_maps, truth_maps, args.level)
    print(f"level {rep.level}: mIoU {100 * rep.miou:.2f}%, "
          f"consistency {100 * rep.consistency:.2f}%")
    for mask, iou in sorted(rep.mask_iou.items()):
        print(f"  mask {mask}: IoU {100 * iou:.2f}%")


def cmd_bench(args):
    threads = resolve_threads(args.threads)
    scene = bio.load_scene(args.scene)
    cameras = bio.load_cameras(args.cameras)[: args.views]
    level = scene.layout.n_levels if args.level is None else check_level(args.level,
                                                                         scene.layout)
    codes = None
    if args.codes:
        codes = bio.load_codes(args.codes)
    t_feat = t_cls = 0.0
    for cam in cameras:
        t0 = time.perf_counter()
        render_features(scene, cam, threads=threads)
        t1 = time.perf_counter()
        render_class_map(scene, cam, level, codes, threads=threads)
        t2 = time.perf_counter()
        t_feat += t1 - t0
        t_cls += t2 - t1
    n = len(cameras)
    print(f"bench: {len(scene)} gaussians, {n} views, threads {threads}")
    print(f"feature render: {1000 * t_feat / n:.2f} ms/view")
    print(f"class map render: {1000 * t_cls / n:.2f} ms/view "
          f"(ratio {t_cls / max(t_feat, 1e-12):.3f})")


def cmd_inspect(args):
    magic = bio.sniff(args.path)
    if magic == bio.CODE_MAGIC:
        codes = bio.load_codes(args.path)
        print("format: BGC1")
        print(f"layout: {','.join(map(str, codes.layout.level_dims))}")
        print(f"codes: {len(codes)}, payload: {4 * len(codes)} bytes")
    elif magic == bio.SCENE_MAGIC:
        scene = bio.load_scene(args.path, allow_empty=True)
        width = bio.scene_record_width(scene.layout)
        print("format: BGS1")
        print(f"layout: {','.join(map(str, scene.layout.level_dims))}")
        print(f"gaussians: {len(scene)}, record: {4 * width} bytes, "
              f"payload: {4 * width * len(scene)} bytes")
    elif magic == bio.MASK_MAGIC:
        stack = bio.load_label_stack(args.path)
        print("format: BGM1")
        print(f"levels: {stack.shape[0]}, size: {stack.shape[2]}x{stack.shape[1]}")
        for lv in range(stack.shape[0]):
            ids = np.unique(stack[lv])
            print(f"  level {lv + 1}: {int((ids != 0).sum())} masks, "
                  f"{int((stack[lv] != 0).sum())} labeled pixels")
    else:
        raise FormatError(f"{args.path}: unknown magic {magic!r}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="binsplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene with masks and cameras")
    p.add_argument("--spec", help="key = value file of SynthSpec fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-ply", help="convert a 3D-GS PLY point cloud to BGS1")
    p.add_argument("--ply", required=True)
    p.add_argument("--layout", default="8,12,12", help="bits per level, e.g. 8,12,12")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_ply)

    p = sub.add_parser("train", help="learn binary codes from mask pyramids")
    p.add_argument("--scene", required=True)
    p.add_argument("--masks", required=True, nargs="+", help="directory or BGM1 files")
    p.add_argument("--cameras", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint prefix to continue from")
    p.add_argument("--threads", type=_count)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render-class", help="render a level-l class map for one camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--codes")
    p.add_argument("--cameras", required=True)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--level", type=_level, required=True)
    p.add_argument("--threads", type=_count)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_class)

    p = sub.add_parser("extract-object", help="write the Gaussians of one class")
    p.add_argument("--scene", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--level", type=_level, required=True)
    p.add_argument("--class", dest="class_value", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_object)

    p = sub.add_parser("eval", help="score predicted label images against truth masks")
    p.add_argument("--pred", required=True, nargs="+")
    p.add_argument("--truth", required=True, nargs="+", help="directory or BGM1 files")
    p.add_argument("--level", type=_level, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time feature and class-map rendering")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--codes")
    p.add_argument("--views", type=_count, default=1)
    p.add_argument("--level", type=_level)
    p.add_argument("--threads", type=_count)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print the header of a BGS1/BGM1/BGC1 file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"binsplat: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BinsplatError, ValueError, TypeError, OSError) as exc:
        print(f"binsplat: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
