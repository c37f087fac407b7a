"""Command-line entry point: synth, train, predict, eval, export, pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import runtime
from .dataset import DatasetError, build_dataset, load_split, read_manifest, split, write_manifest
from .lidar_model import PointCloudFormatError, SensorConfig, read_point_cloud
from .pix2pix import TrainingError
from .metric import DetectorConfig, UndefinedScoreError, evaluate_run, write_report_csv
from .projection import ChannelMode, RasterFormatError, RasterImage, project_frame, read_raster, to_uint8, \
    write_png
from .scene import SceneGenerationError, SceneParams

log = logging.getLogger("lidar2photo")

MODES = [m.value for m in ChannelMode]
SEPARATOR = 2


class UsageError(Exception):
    pass


# --- parser -----------------------------------------------------------------

def _synth_flags(p):
    g = p.add_argument_group("dataset synthesis")
    g.add_argument("--count", type=int, default=200, help="number of pairs (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="first scene seed (default: %(default)s)")
    g.add_argument("--size", type=int, default=64, help="raster/image side in pixels (default: %(default)s)")
    g.add_argument("--subsample", type=int, default=4, help="keep every n-th ray (default: %(default)s)")
    g.add_argument("--mode", choices=MODES, default="reflectance_distance", help="input channels (default: %(default)s)")
    g.add_argument("--test-fraction", type=float, default=0.2, help="share of scenes held out (default: %(default)s)")
    g.add_argument("--split-seed", type=int, default=None, help="shuffle seed for the split (default: --seed)")
    g.add_argument("--min-cars", type=int, default=1, help="fewest cars per scene (default: %(default)s)")
    g.add_argument("--max-cars", type=int, default=4, help="most cars per scene (default: %(default)s)")
    g.add_argument("--black-prob", type=float, default=0.3, help="probability a car is black (default: %(default)s)")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--preset", choices=["exp1", "exp2", "custom"], default="custom",
                   help="exp1: 1 channel, 50 epochs; exp2: 2 channels, 40 epochs (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=None, help="override the preset epoch count (default: preset, 40)")
    g.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--beta1", type=float, default=0.5, help="Adam beta1 (default: %(default)s)")
    g.add_argument("--lambda-l1", type=float, default=100.0, help="L1 weight (default: %(default)s)")
    g.add_argument("--base-filters", type=int, default=64, help="network width (default: %(default)s)")
    g.add_argument("--train-seed", type=int, default=0, help="init/shuffle seed (default: %(default)s)")
    g.add_argument("--val-fraction", type=float, default=0.1,
                   help="share of training pairs used to pick the best epoch (default: %(default)s)")
    g.add_argument("--keep", choices=["best", "final"], default="best", help="checkpoint to save (default: %(default)s)")
    g.add_argument("--log", default=None, help="per-epoch CSV (default: <checkpoint>.csv)")


def _eval_flags(p):
    g = p.add_argument_group("evaluation")
    g.add_argument("--split", choices=["train", "test"], default="test", help="split to score (default: %(default)s)")
    g.add_argument("--max-pairs", type=int, default=100, help="evaluate at most this many pairs (default: %(default)s)")
    g.add_argument("--report", default=None, help="CSV report path (default: eval_report.csv next to the checkpoint)")
    g.add_argument("--ground-truth", action="store_true", default=False,
                   help="score the targets themselves instead of predictions (default: off)")
    g.add_argument("--color-tol", type=float, default=0.25, help="per-channel color tolerance (default: %(default)s)")
    g.add_argument("--min-area", type=int, default=6, help="smallest blob in pixels (default: %(default)s)")
    g.add_argument("--iou", type=float, default=0.3, help="blob/box IoU threshold (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value file; flags given on the command line win (default: none)")
    common.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress (default: off)")

    parser = argparse.ArgumentParser(prog="lidar2photo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="simulate a paired dataset")
    _synth_flags(p)
    p.add_argument("--out", default="dataset", help="output directory (default: %(default)s)")

    p = sub.add_parser("train", parents=[common], help="train on a dataset's train split")
    p.add_argument("--dataset", default=None, help="dataset directory or manifest (required)")
    p.add_argument("--out", default="checkpoint.l2ck", help="checkpoint path (default: %(default)s)")
    _train_flags(p)

    p = sub.add_parser("predict", parents=[common], help="predict an image from one raster or point cloud")
    p.add_argument("--checkpoint", default=None, help="checkpoint file (required)")
    p.add_argument("--input", default=None, help=".l2ri raster, or .l2pc/.csv point cloud (required)")
    p.add_argument("--out", default="prediction.png", help="output PNG (default: %(default)s)")

    p = sub.add_parser("eval", parents=[common], help="car-presence score on a split")
    p.add_argument("--checkpoint", default=None, help="checkpoint file (required unless --ground-truth)")
    p.add_argument("--dataset", default=None, help="dataset directory or manifest (required)")
    _eval_flags(p)

    p = sub.add_parser("export", parents=[common], help="write side-by-side frames for a video")
    p.add_argument("--checkpoint", default=None, help="checkpoint file (required)")
    p.add_argument("--dataset", default=None, help="dataset directory or manifest (required)")
    p.add_argument("--split", choices=["train", "test"], default="test", help="split to export (default: %(default)s)")
    p.add_argument("--max-pairs", type=int, default=None, help="export at most this many frames (default: all)")
    p.add_argument("--out", default="frames", help="output directory (default: %(default)s)")

    p = sub.add_parser("pipeline", parents=[common], help="synth, then train, then eval")
    p.add_argument("--workdir", default="run", help="directory for dataset, checkpoint, report (default: %(default)s)")
    _synth_flags(p)
    _train_flags(p)
    _eval_flags(p)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _read_config(path: str, sub: argparse.ArgumentParser) -> dict:
    """Convert a key=value file into validated defaults for ``sub``."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    for n, ln in enumerate(lines, 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, value = ln.partition("=")
        key, value = key.strip().lstrip("-").replace("-", "_"), value.strip()
        if not sep or key not in actions:
            raise UsageError(f"{path}:{n}: unknown setting {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise UsageError(f"{path}:{n}: {key} expects true/false")
            out[key] = value.lower() in ("1", "true", "yes")
            continue
        try:
            conv = action.type(value) if action.type else value
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value {value!r} for {key}") from None
        if action.choices and conv not in action.choices:
            raise UsageError(f"{path}:{n}: {key} must be one of {list(action.choices)}")
        out[key] = conv
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**_read_config(args.config, sub))
        args = parser.parse_args(argv)
    _validate(args)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def _validate(args) -> None:
    cmd = args.command
    if cmd in ("synth", "pipeline"):
        if args.count < 1 or args.size < 16 or args.subsample < 1:
            raise UsageError("need --count >= 1, --size >= 16, --subsample >= 1")
        if args.size & (args.size - 1):
            raise UsageError("--size must be a power of two")
    if cmd in ("train", "pipeline"):
        if args.epochs is not None and args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        if not 0.0 <= args.val_fraction < 1.0:
            raise UsageError("--val-fraction must be in [0, 1)")
    if cmd == "train":
        _require(args, "dataset")
    elif cmd == "predict":
        _require(args, "checkpoint", "input")
    elif cmd == "eval":
        _require(args, "dataset")
        if not args.ground_truth:
            _require(args, "checkpoint")
    elif cmd == "export":
        _require(args, "checkpoint", "dataset")


# --- commands ---------------------------------------------------------------

def cmd_synth(args, out=None) -> Path:
    out = Path(out or args.out)
    params = SceneParams(car_count_range=(args.min_cars, args.max_cars), black_car_probability=args.black_prob)
    manifest = build_dataset(args.count, args.seed, out, params, SensorConfig(), args.mode,
                             (args.size, args.size), args.subsample)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    manifest = split(manifest, args.test_fraction, split_seed)
    path = write_manifest(manifest)
    print(path)
    return path


def _train_config(args, mode: ChannelMode):
    from .pix2pix import TrainConfig, preset

    common = dict(learning_rate=args.lr, adam_beta1=args.beta1, lambda_l1=args.lambda_l1,
                  seed=args.train_seed, base_filters=args.base_filters)
    if args.epochs is not None:
        common["epochs"] = args.epochs
    if args.preset == "custom":
        return TrainConfig(mode=mode, **common)
    cfg = preset(args.preset, **common)
    if cfg.mode is not mode:
        raise UsageError(f"preset {args.preset} needs a {cfg.mode.value} dataset, "
                         f"but the dataset mode is {mode.value}")
    return cfg


def cmd_train(args, dataset=None, out=None) -> Path:
    from .pix2pix import save_checkpoint, train, write_epoch_log

    manifest = read_manifest(dataset or args.dataset)
    cfg = _train_config(args, manifest.mode)
    pairs = load_split(manifest, "train")
    if not pairs:
        raise DatasetError("the train split is empty")
    n_val = int(round(len(pairs) * args.val_fraction))
    if n_val >= len(pairs):
        n_val = 0
    order = np.random.default_rng(cfg.seed).permutation(len(pairs))
    val_idx = set(int(i) for i in order[:n_val])
    train_set = [(p[1], p[2]) for i, p in enumerate(pairs) if i not in val_idx]
    val_set = [(p[1], p[2]) for i, p in enumerate(pairs) if i in val_idx]
    log.info("training %s for %d epochs on %d pairs (%d held out)", cfg.mode.value, cfg.epochs,
             len(train_set), len(val_set))
    result = train(train_set, cfg, val_set)
    ckpt_path = Path(out or args.out)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, result.best if args.keep == "best" else result.final)
    log_path = Path(args.log) if args.log else ckpt_path.with_suffix(".csv")
    write_epoch_log(log_path, result.history)
    print(f"checkpoint={ckpt_path} epochs={len(result.history)} log={log_path}")
    return ckpt_path


def cmd_predict(args) -> Path:
    from .pix2pix import load_checkpoint, predict

    ckpt = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if src.suffix.lower() == ".l2ri":
        raster = read_raster(src)
    else:
        cloud = read_point_cloud(src)
        raster = project_frame(cloud, SensorConfig(), ckpt.mode, (ckpt.image_size, ckpt.image_size))
    image = predict(ckpt, raster)
    write_png(args.out, image)
    print(args.out)
    return Path(args.out)


def cmd_eval(args, dataset=None, checkpoint=None):
    manifest = read_manifest(dataset or args.dataset)
    samples = load_split(manifest, args.split)[: args.max_pairs]
    if not samples:
        raise DatasetError(f"the {args.split} split is empty")
    ckpt = None
    ckpt_path = checkpoint or args.checkpoint
    if not args.ground_truth:
        from .pix2pix import load_checkpoint
        ckpt = load_checkpoint(ckpt_path)
    det = DetectorConfig(args.color_tol, args.min_area, args.iou)
    report = evaluate_run(ckpt, samples, det, ground_truth=args.ground_truth)
    if args.report:
        report_path = Path(args.report)
    elif ckpt_path:
        report_path = Path(ckpt_path).parent / "eval_report.csv"
    else:
        report_path = manifest.root / "eval_report.csv"
    write_report_csv(report_path, report)
    print(report.summary())
    return report


def input_preview(raster: RasterImage) -> np.ndarray:
    """(H, W, 3) uint8: reflectance as gray, or reflectance in red and distance in green."""
    q = to_uint8(raster)
    if raster.channels == 1:
        return np.repeat(q, 3, axis=2)
    return np.stack([q[:, :, 0], q[:, :, 1], np.zeros_like(q[:, :, 0])], axis=2)


def side_by_side(raster: RasterImage, predicted: RasterImage, target: RasterImage) -> np.ndarray:
    h = raster.height
    sep = np.full((h, SEPARATOR, 3), 255, dtype=np.uint8)
    return np.concatenate([input_preview(raster), sep, to_uint8(predicted), sep, to_uint8(target)], axis=1)


def cmd_export(args) -> list[Path]:
    from PIL import Image

    from .pix2pix import load_checkpoint, predict_many

    manifest = read_manifest(args.dataset)
    samples = load_split(manifest, args.split)
    if args.max_pairs is not None:
        samples = samples[: args.max_pairs]
    ckpt = load_checkpoint(args.checkpoint)
    preds = predict_many(ckpt, [s[1] for s in samples])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (s, pred) in enumerate(zip(samples, preds)):
        p = out / f"frame_{k:05d}.png"
        Image.fromarray(side_by_side(s[1], pred, s[2]), mode="RGB").save(p, format="PNG")
        paths.append(p)
    print(f"{len(paths)} frames in {out}")
    return paths


def cmd_pipeline(args):
    work = Path(args.workdir)
    manifest_path = cmd_synth(args, out=work / "dataset")
    ckpt = cmd_train(args, dataset=manifest_path, out=work / "checkpoint.l2ck")
    if args.report is None:
        args.report = str(work / "eval_report.csv")
    return cmd_eval(args, dataset=manifest_path, checkpoint=ckpt)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "export": cmd_export, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"lidar2photo: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        runtime.configure()
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lidar2photo: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, RasterFormatError, PointCloudFormatError, SceneGenerationError,
            UndefinedScoreError, TrainingError, ValueError, OSError) as exc:
        print(f"lidar2photo {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
