"""Command line entry point: ``vigs run|synth|eval|render``."""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .camera import CameraIntrinsics, CameraModel
from .dataset import SyntheticSceneSpec, load_sequence, save_rgb_png, synthesize_sequence
from .errors import InvalidArgumentError, MissingAssetError, VigsError
from .metrics import Trajectory, ate_rmse
from .pipeline import INIT_MODES, PipelineConfig, run_sequence
from .se3 import Pose
from .splat import GaussianMap, render

log = logging.getLogger("vigs")


def builtin_spec(name: str) -> Path | None:
    """Path of a scene spec shipped with the package, e.g. ``fast_corridor``."""
    p = resources.files("vigs") / "data" / f"{name}.json"
    return Path(str(p)) if p.is_file() else None


def _cmd_run(args) -> int:
    manifest = load_sequence(args.input)
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {"output_dir": args.output}
    if args.init:
        overrides["init_mode"] = args.init
    if args.no_mapping:
        overrides["mapping_enabled"] = False
    report = run_sequence(manifest, cfg.replace(**overrides))
    m = report.metrics
    print(f"frames={m.frame_count}")
    print(f"keyframes={len(report.keyframes)}")
    if m.ate_rmse is not None:
        print(f"ate_rmse={m.ate_rmse:.6f}")
    if m.psnr:
        print(f"psnr_mean={m.psnr_mean:.6f}")
    return 0


def _cmd_synth(args) -> int:
    path = Path(args.spec)
    if not path.is_file() and builtin_spec(args.spec) is not None:
        path = builtin_spec(args.spec)
    spec = SyntheticSceneSpec.from_json(path)
    manifest = synthesize_sequence(spec, args.output)
    print(f"frames={len(manifest)}")
    print(f"imu_samples={len(manifest.imu)}")
    return 0


def _cmd_eval(args) -> int:
    for p in (args.est, args.ref):
        if not Path(p).is_file():
            raise MissingAssetError([p])
    rmse, _ = ate_rmse(Trajectory.load_tum(args.est), Trajectory.load_tum(args.ref),
                       align=not args.no_align)
    print(f"ate_rmse={rmse:.6f}")
    return 0


def _cmd_render(args) -> int:
    if not Path(args.map).is_file():
        raise MissingAssetError([args.map])
    gmap, intr = GaussianMap.load(args.map)
    given = [args.fx, args.fy, args.cx, args.cy, args.width, args.height]
    if all(v is not None for v in given):
        intr = CameraIntrinsics(args.fx, args.fy, args.cx, args.cy, args.width, args.height)
    elif intr is None:
        raise InvalidArgumentError("map has no stored intrinsics; pass --fx --fy --cx --cy --width --height")
    vals = [float(v) for v in args.pose.replace(",", " ").split()]
    if len(vals) != 7:
        raise InvalidArgumentError("--pose needs 7 values: tx ty tz qx qy qz qw")
    out = render(gmap, CameraModel.from_world_pose(intr, Pose.from_tum(vals)))
    save_rgb_png(args.output, out.color)
    print(f"wrote={args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vigs", description="Visual-inertial RGB-D SLAM with a Gaussian map")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="track and map a sequence directory")
    run.add_argument("--input", required=True)
    run.add_argument("--config")
    run.add_argument("--output", required=True)
    run.add_argument("--init", choices=INIT_MODES)
    run.add_argument("--no-mapping", action="store_true")
    run.set_defaults(func=_cmd_run)

    synth = sub.add_parser("synth", help="write a synthetic sequence from a JSON scene spec")
    synth.add_argument("--spec", required=True, help="JSON file or a bundled name (fast_corridor, slow_desk)")
    synth.add_argument("--output", required=True)
    synth.set_defaults(func=_cmd_synth)

    ev = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    ev.add_argument("--est", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--no-align", action="store_true")
    ev.set_defaults(func=_cmd_eval)

    rd = sub.add_parser("render", help="render a saved map from a world-from-camera pose")
    rd.add_argument("--map", required=True)
    rd.add_argument("--pose", required=True, help='"tx ty tz qx qy qz qw"')
    rd.add_argument("--output", required=True)
    for name in ("fx", "fy", "cx", "cy"):
        rd.add_argument(f"--{name}", type=float)
    rd.add_argument("--width", type=int)
    rd.add_argument("--height", type=int)
    rd.set_defaults(func=_cmd_render)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except VigsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
