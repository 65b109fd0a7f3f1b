"""Command-line entry point: ``bevfuse <command> ...``.

Every command writes its artifact to the given path and a short summary to
stderr. Timings only ever go to stderr so artifacts stay byte-identical
across repeated runs.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

from .augmentation import MalfunctionSpec
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    TrainingError,
    ValidationError,
    append_csv_row,
    corrupt_scene,
    load_scenes,
    run_experiment,
    scene_inputs,
    train_toy,
)
from .model import Model
from .synthetic import EVAL_FIRST_INDEX, Manifest, Scene, read_scene, write_dataset, write_scene
from .tensor_ops import NonFiniteError

log = logging.getLogger("bevfuse")


class CLIError(Exception):
    pass


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_generate(args) -> None:
    cfg = _config(args.config)
    n = cfg.scene.train_scenes if args.split == "train" else cfg.scene.eval_scenes
    first = 0 if args.split == "train" else EVAL_FIRST_INDEX
    if args.num_scenes is not None:
        n = args.num_scenes
    write_dataset(args.out, cfg.scene_spec(), n, first)
    print(f"wrote {n} {args.split} scenes to {args.out}", file=sys.stderr)


def cmd_train(args) -> None:
    cfg = _config(args.config)
    start = Model.load(cfg, args.init) if args.init else None
    result = train_toy(cfg, args.data, model=start)
    result.model.save(args.out)
    tail = result.losses[-min(20, len(result.losses)):] or [float("nan")]
    print(f"trained {cfg.train.iterations} iterations ({cfg.streams}), mean loss of last {len(tail)}: "
          f"{sum(tail) / len(tail):.4f}, {result.seconds:.1f} s", file=sys.stderr)


def cmd_run(args) -> None:
    cfg = _config(args.config)
    model = Model.load(cfg, args.params)
    t0 = time.perf_counter()
    report = run_experiment(cfg, args.data, model, workers=args.workers)
    Path(args.out).write_text(report.to_json())
    if args.csv:
        append_csv_row(args.csv, cfg, report, label=args.label or "")
    print(f"mAP {report.mAP:.4f} NDS {report.nds:.4f} over {report.num_scenes} scenes "
          f"({time.perf_counter() - t0:.1f} s)", file=sys.stderr)


def cmd_augment(args) -> None:
    src, dst = Path(args.inp), Path(args.out)
    if src.resolve() == dst.resolve():
        raise CLIError("--in and --out must differ")
    manifest = Manifest.load(src)
    seed = manifest.seed if args.seed is None else args.seed
    if args.mode == "fov":
        if args.fov_min is None or args.fov_max is None:
            raise CLIError("--mode fov needs --fov-min and --fov-max (radians)")
        spec = MalfunctionSpec(fov=(args.fov_min, args.fov_max), seed=seed)
    elif args.mode == "objdrop":
        spec = MalfunctionSpec(object_dropout=(args.p_frame, args.p_object), seed=seed)
    else:
        spec = MalfunctionSpec(camera_mode=args.camera_mode, stuck_prob=args.stuck_prob, seed=seed)
    n_cams = len(manifest.cameras)
    if not 0 <= args.front_index < n_cams:
        raise CLIError(f"--front-index {args.front_index} outside the {n_cams}-camera rig")
    dst.mkdir(parents=True, exist_ok=True)
    prev = None
    for k in range(manifest.num_scenes):
        scene = read_scene(src, k, n_cams)
        cloud, feats = corrupt_scene(scene, spec, k, args.front_index, prev)
        write_scene(dst, k, Scene(scene.boxes, cloud, feats, scene.camera_depth))
        prev = scene
    shutil.copyfile(src / "manifest.json", dst / "manifest.json")
    print(f"applied {args.mode} to {manifest.num_scenes} scenes -> {dst}", file=sys.stderr)


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    only = set(args.only.split(",")) if args.only else None
    report = run_gradcheck(args.seed, corrupt=args.corrupt, only=only)
    for line in report.lines():
        print(line)
    print(f"gradcheck took {report.seconds:.1f} s", file=sys.stderr)
    if not report.passed:
        worst = report.failures()[0]
        print(f"error: gradient check failed for {worst.op} at {worst.worst}", file=sys.stderr)
        return 1
    return 0


def cmd_viz(args) -> None:
    from .viz import dump_bev

    cfg = _config(args.config)
    manifest, scenes = load_scenes(cfg, args.data)
    if not 0 <= args.scene < manifest.num_scenes:
        raise CLIError(f"--scene {args.scene} outside 0..{manifest.num_scenes - 1}")
    model = Model.load(cfg, args.params)
    inp = scene_inputs(cfg, scenes, args.scene, cfg.malfunction_spec())
    dets = model.detect(inp)
    scene = scenes[args.scene]
    cloud = scene.cloud
    if not cfg.malfunction_spec().is_clean:
        prev = scenes[args.scene - 1] if args.scene > 0 else None
        cloud, _ = corrupt_scene(scene, cfg.malfunction_spec(), args.scene, cfg.cameras.front_index, prev)
    dump_bev(cfg.grid_spec(), cloud, dets, scene.boxes, args.out)
    print(f"wrote {args.out} ({len(dets)} detections, {len(scene.boxes)} GT boxes)", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevfuse", description="Toy LiDAR-camera BEV fusion detector.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--num-scenes", type=int, help="override the config's scene count")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a detector on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="parameter file to write")
    t.add_argument("--init", help="start from this parameter file (fine-tuning) instead of a fresh init")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("run", help="corrupt, detect and score a dataset")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--out", required=True, help="metrics report (JSON)")
    r.add_argument("--csv", help="append a summary row to this CSV")
    r.add_argument("--label", help="label column for --csv")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("augment", help="write a corrupted copy of a dataset")
    a.add_argument("--mode", choices=("fov", "objdrop", "camera"), required=True)
    a.add_argument("--fov-min", type=float)
    a.add_argument("--fov-max", type=float)
    a.add_argument("--p-frame", type=float, default=0.5)
    a.add_argument("--p-object", type=float, default=0.5)
    a.add_argument("--camera-mode", choices=("missing_front", "preserve_front", "stuck"), default="missing_front")
    a.add_argument("--stuck-prob", type=float, default=0.5)
    a.add_argument("--front-index", type=int, default=0)
    a.add_argument("--seed", type=int, help="defaults to the dataset seed")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_augment)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: perturb one op's gradient
    c.add_argument("--only", help=argparse.SUPPRESS)  # test hook: comma-separated op subset
    c.set_defaults(fn=cmd_gradcheck)

    v = sub.add_parser("viz", help="dump a BEV image of one scene")
    v.add_argument("--config")
    v.add_argument("--data", required=True)
    v.add_argument("--scene", type=int, required=True)
    v.add_argument("--params", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = args.fn(args)
    except (CLIError, ConfigError, ValidationError, TrainingError, NonFiniteError, ValueError,
            FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
