"""Command line entry point: nplf {gen-scene, train, render, eval, ablate}.

Exit codes: 0 ok, 2 usage/input error, 3 refusal to overwrite, 4 numeric
failure, 5 checkpoint/config incompatibility. Numeric knobs live in JSON
config files; only --seed, --steps, --force and --resume are flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import scene_io, synth_scenes, training
from .scene_io import ConfigError, RunConfig, SceneError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_OVERWRITE = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(path)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_gen_scene(args) -> int:
    try:
        spec = synth_scenes.SceneSpec.from_json(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    except (OSError, SceneError) as e:
        return _fail(str(e), EXIT_INPUT)
    if os.path.exists(os.path.join(args.out, "scene.json")) and not args.force:
        return _fail(f"{args.out} already holds a scene (use --force)", EXIT_OVERWRITE)
    try:
        synth_scenes.generate_scene(spec, args.out)
    except SceneError as e:
        return _fail(str(e), EXIT_INPUT)
    print(f"wrote scene to {args.out}")
    return EXIT_OK


def _checkpoint_path(out_dir) -> str:
    return os.path.join(out_dir, "checkpoint.nplf")


def cmd_train(args) -> int:
    try:
        config = _load_config(args.config)
        if args.seed is not None:
            import dataclasses
            config = dataclasses.replace(config, seed=args.seed)
        scene = scene_io.load_scene(args.scene)
    except (ConfigError, SceneError, OSError) as e:
        return _fail(str(e), EXIT_INPUT)
    os.makedirs(args.out, exist_ok=True)
    ckpt = _checkpoint_path(args.out)
    steps = args.steps if args.steps is not None else config.total_steps
    if args.steps is not None and args.config is None:
        # a bare --steps run also schedules the decay over that budget
        import dataclasses
        config = dataclasses.replace(config, total_steps=args.steps)
    try:
        if args.resume and os.path.exists(ckpt):
            state = training.load_checkpoint(ckpt)
            if state.config.content_hash() != config.content_hash() and args.config:
                return _fail("checkpoint config differs from --config", EXIT_COMPAT)
        else:
            state = training.new_state(config)
        scene = scene_io.split_frames(scene, state.config.holdout_fraction,
                                      state.config.seed)
        trainer = training.Trainer(state, scene,
                                   metrics_path=os.path.join(args.out, "metrics.jsonl"))
        state.config.to_json(os.path.join(args.out, "config.json"))
        remaining = max(steps - state.step, 0)
        trainer.run(remaining, checkpoint_path=ckpt, progress=args.progress)
    except training.NonFiniteLossError as e:
        dump = os.path.join(args.out, "diagnostic_dump.json")
        with open(dump, "w") as f:
            json.dump(e.details, f, indent=1)
        return _fail(f"{e} (dump: {dump})", EXIT_NUMERIC)
    except training.CheckpointError as e:
        return _fail(str(e), EXIT_COMPAT)
    print(f"trained to step {state.step}; checkpoint at {ckpt}")
    return EXIT_OK


def _load_for_inference(args):
    state = training.load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        config = _load_config(args.config)
        if config.content_hash() != state.config.content_hash():
            raise training.CheckpointError(
                "config hash mismatch between checkpoint and --config"
            )
    scene = scene_io.load_scene(args.scene)
    scene = scene_io.split_frames(scene, state.config.holdout_fraction,
                                  state.config.seed)
    return state, scene


def cmd_render(args) -> int:
    try:
        state, scene = _load_for_inference(args)
    except training.CheckpointError as e:
        return _fail(str(e), EXIT_COMPAT)
    except (ConfigError, SceneError, OSError) as e:
        return _fail(str(e), EXIT_INPUT)
    os.makedirs(args.out, exist_ok=True)
    model = state.model
    model.eval()
    if args.poses == "holdout":
        targets = [
            (f"render_{i:04d}.png", scene.frames[i].camera, scene.frames[i].cloud)
            for i in scene.holdout_indices()
        ]
    else:
        try:
            with open(args.poses) as f:
                pose_list = json.load(f)["poses"]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            return _fail(f"bad pose file: {e}", EXIT_INPUT)
        first = scene.frames[0].camera
        centers = np.stack([fr.camera.center for fr in scene.frames])
        targets = []
        for i, flat in enumerate(pose_list):
            pose = np.array(flat, dtype=np.float64).reshape(4, 4)
            cam = scene_io.CameraView(first.intrinsics, pose, first.width,
                                      first.height, frame_index=i)
            nearest = int(np.argmin(np.linalg.norm(centers - cam.center, axis=1)))
            targets.append((f"render_{i:04d}.png", cam, scene.frames[nearest].cloud))
    for name, camera, cloud in targets:
        image, _ = model.render_image(camera, cloud)
        scene_io.write_image(os.path.join(args.out, name), image)
    print(f"rendered {len(targets)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state, scene = _load_for_inference(args)
    except training.CheckpointError as e:
        return _fail(str(e), EXIT_COMPAT)
    except (ConfigError, SceneError, OSError) as e:
        return _fail(str(e), EXIT_INPUT)
    report = {
        "reconstruction": training.evaluate(state, scene, task="reconstruction").to_dict(),
        "interpolation": training.evaluate(state, scene, task="interpolation").to_dict(),
    }
    blob = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(blob + "\n")
    print(blob)
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        config = _load_config(args.config)
        if args.seed is not None:
            import dataclasses
            config = dataclasses.replace(config, seed=args.seed)
        scene = scene_io.load_scene(args.scene)
    except (ConfigError, SceneError, OSError) as e:
        return _fail(str(e), EXIT_INPUT)
    scene = scene_io.split_frames(scene, config.holdout_fraction, config.seed)
    os.makedirs(args.out, exist_ok=True)
    budget = args.steps if args.steps is not None else config.total_steps
    table_path = os.path.join(args.out, "ablation.json")
    try:
        rows = training.run_ablation(scene, config, budget, out_path=table_path,
                                     progress=args.progress)
    except training.NonFiniteLossError as e:
        return _fail(str(e), EXIT_NUMERIC)
    print(json.dumps(rows, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nplf")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("spec", help="SceneSpec JSON file")
    p.add_argument("out", help="output scene directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--progress", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render holdout frames or a pose file")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--poses", default="holdout", help="'holdout' or a pose JSON file")
    p.add_argument("--config")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM report for reconstruction+interpolation")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="aggregation/K ablation sweep")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--progress", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code not in (0, None) else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
