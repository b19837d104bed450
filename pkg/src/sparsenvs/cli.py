"""Command line entry point: ``sparsenvs <command> [options]``.

Every failure exits nonzero and prints exactly one line to stderr::

    error: <code>: <message>
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import load_config, parse_set_flags, save_config
from .pipeline import PipelineError, cmd_evaluate, cmd_generate, cmd_make_scenes, cmd_train
from .scene import SceneFormatError

ENV_ROOT = "SPARSENVS_HOME"

EXIT_CODES = {
    "invalid-argument": 2,
    "config": 2,
    "missing-checkpoint": 3,
    "missing-scenes": 3,
    "scene-format": 4,
    "io": 5,
    "nan-loss": 6,
    "internal": 1,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON config file")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", type=Path, help=f"output directory (default ${ENV_ROOT} or ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. geometry.radius=0.1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsenvs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scenes", help="render synthetic RGB-D scenes to disk")
    _common(p)
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--frames", type=int, help="frames per scene")

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("stage", choices=["geometry", "codec", "generator"])
    _common(p)
    p.add_argument("--steps", type=int, help="override the stage's train_steps")

    p = sub.add_parser("generate", help="generate one novel view")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--n-obs", type=int, default=4)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-frame", type=int)
    target.add_argument("--target-pose", help="JSON 4x4 camera-to-world matrix (row-major nested list)")
    p.add_argument("--mode", choices=["greedy", "multinomial"])

    p = sub.add_parser("evaluate", help="generate all novel views of a view set and score them")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--n-obs", type=int, default=4)
    p.add_argument("--predict", choices=["model", "ground-truth"], default="model")
    p.add_argument("--mode", choices=["greedy", "multinomial"])
    return parser


def _resolve(args):
    overrides = parse_set_flags(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "scenes", None) is not None:
        overrides["scene.n_scenes"] = args.scenes
    if getattr(args, "frames", None) is not None:
        overrides["scene.n_frames"] = args.frames
    if getattr(args, "mode", None) is not None:
        overrides["generator.mode"] = args.mode
    try:
        cfg = load_config(args.config, overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise PipelineError("config", str(exc)) from exc
    out = args.out or Path(os.environ.get(ENV_ROOT, cfg.out_dir))
    cfg.out_dir = str(out)
    return cfg, out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg, out = _resolve(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "make-scenes":
        save_config(cfg, out / "make-scenes.config.json")
        for path in cmd_make_scenes(cfg, out):
            print(path)
    elif args.command == "train":
        save_config(cfg, out / f"train-{args.stage}.config.json")
        print(cmd_train(args.stage, cfg, out, args.steps))
    elif args.command == "generate":
        pose = None
        if args.target_pose is not None:
            try:
                pose = np.asarray(json.loads(args.target_pose), dtype=np.float64).reshape(4, 4)
            except (ValueError, TypeError) as exc:
                raise PipelineError("invalid-argument", f"bad --target-pose: {exc}") from exc
        result = cmd_generate(args.scene, args.n_obs, cfg, out, args.target_frame, pose)
        print(json.dumps({k: v for k, v in result.items() if k != "tokens"}))
    elif args.command == "evaluate":
        report = cmd_evaluate(args.scene, args.n_obs, cfg, out, args.predict)
        print(json.dumps(report.to_dict()["mean"]))
    return 0


def _classify(exc: BaseException) -> str:
    if isinstance(exc, PipelineError):
        return exc.code
    if isinstance(exc, (SceneFormatError, FileNotFoundError)):
        return "scene-format"
    if isinstance(exc, CheckpointError):
        return "missing-checkpoint"
    if isinstance(exc, FloatingPointError):
        return "nan-loss"
    return "internal"


def main(argv=None) -> int:
    try:
        return run(argv)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        code = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {code}: {message}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
