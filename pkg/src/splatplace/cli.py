"""Command line entry point.

Exit codes: 0 ok, 2 configuration error, 3 oracle backend error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .oracles import OracleError

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_STAGE = 0, 2, 3, 4

STAGE_COMMANDS = {
    "parse": "parse",
    "fit-region": "region",
    "init": "dof_init",
    "refine": "refine",
    "appearance": "appearance",
    "run": "merge",
    "replace": "merge",
}


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--backend", help="oracle backend: fixture:<path> or http:<url>")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="splatplace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=f"run the pipeline through the {stage} stage")
        p.add_argument("--fresh", action="store_true", help="ignore cached stage artifacts")

    p = sub.add_parser("synth", parents=[common], help="write synthetic benchmark cases")
    p.add_argument("--n-cases", type=int, default=15)
    p.add_argument("--record", action="store_true", help="run each case once to record its oracle fixture")
    _step_flags(p)

    p = sub.add_parser("eval", parents=[common], help="run and score the synthetic benchmark")
    p.add_argument("--n-cases", type=int, default=15)
    p.add_argument("--point-noise", type=float, default=0.0, help="pixel noise on oracle points")
    p.add_argument("--box-noise", type=float, default=0.0, help="pixel noise on oracle boxes")
    _step_flags(p)

    p = sub.add_parser("render", parents=[common], help="render a PLY to PNGs")
    p.add_argument("ply")
    p.add_argument("--views", help="camera list JSON (default: 8-view orbit)")
    p.add_argument("--size", type=int, default=64)
    return parser


def _step_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--region-iters", type=int, default=200)
    p.add_argument("--refine-steps", type=int, default=400)
    p.add_argument("--appearance-steps", type=int, default=100)


def _load_config(args):
    from .pipeline import ConfigError, PipelineConfig

    if not args.config:
        raise ConfigError("--config is required")
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.backend:
        cfg.backend = args.backend
        # a backend given on the command line is relative to the caller
        kind, _, target = args.backend.partition(":")
        if kind == "fixture":
            cfg.backend = f"fixture:{Path(target).resolve()}"
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if args.command == "replace":
        cfg.mode = "replace"
    return cfg


def _cmd_stage(args) -> dict:
    from .pipeline import run_pipeline

    cfg = _load_config(args)
    result = run_pipeline(cfg, until=STAGE_COMMANDS[args.command], fresh=args.fresh)
    out = {
        "out": str(result.out_dir),
        "artifacts": {k: str(v) for k, v in result.artifacts.items()},
        "cached": result.cached,
    }
    if result.dof is not None:
        out["dof"] = result.dof.to_dict()
    if result.scene is not None:
        out["splat_count"] = len(result.scene)
    return out


def _steps(args) -> dict:
    return {"region": args.region_iters, "refine": args.refine_steps, "appearance": args.appearance_steps}


def _cmd_synth(args) -> dict:
    from .benchmark import run_case, synth_benchmark

    out = Path(args.out or "benchmark")
    written = []
    for case in synth_benchmark(args.n_cases, args.seed or 0):
        d = out / case.name
        if args.record:
            run_case(case, d, _steps(args))
        else:
            case.write(d, _steps(args))
        written.append(str(d / "config.json"))
    return {"cases": written}


def _cmd_eval(args) -> dict:
    from .benchmark import run_benchmark

    summary, _ = run_benchmark(
        args.n_cases, args.seed or 0, Path(args.out or "benchmark"), _steps(args),
        point_noise_px=args.point_noise, box_noise_px=args.box_noise,
    )
    return summary


def _cmd_render(args) -> dict:
    from .gaussians import load_ply
    from .render import Camera, image_to_png, orbit_cameras, render_preview

    scene = load_ply(args.ply)
    if args.views:
        views = [Camera.from_dict(d) for d in json.loads(Path(args.views).read_text())]
    else:
        radius = 1.2 * max(scene.diameter(), 1e-6)
        views = orbit_cameras(scene.weighted_centroid(), radius, 8, width=args.size, height=args.size)
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cam in enumerate(views):
        path = out / f"view_{i:03d}.png"
        path.write_bytes(image_to_png(render_preview(cam, scene)))
        paths.append(str(path))
    return {"renders": paths}


def main(argv=None) -> int:
    from .pipeline import ConfigError, StageFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"synth": _cmd_synth, "eval": _cmd_eval, "render": _cmd_render}
    try:
        out = handlers.get(args.command, _cmd_stage)(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_BACKEND if isinstance(exc.cause, OracleError) else EXIT_STAGE
    except OracleError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    print(json.dumps(out, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
