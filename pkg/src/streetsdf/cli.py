"""Command-line entry point.

Subcommands cover the full workflow: make-synth builds a synthetic dataset,
train optimizes a scene, render / extract-mesh / extract-occgrid /
simulate-lidar consume a checkpoint, eval writes a metrics report. Global
flags: --config (JSON), --set section.key=value overrides, --seed,
--deterministic, --threads. Exit codes: 0 success, 1 runtime error
(machine-readable JSON on stderr), 2 argument errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _limit_threads(n: int | None) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _global_flags(parser, suppress: bool) -> None:
    """Global flags, accepted both before and after the subcommand."""
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, help="JSON config file",
                        default=d)
    parser.add_argument("--set", dest="overrides", action="append",
                        default=argparse.SUPPRESS if suppress else [],
                        metavar="KEY=VALUE", help="dotted config override")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)
    parser.add_argument("--threads", type=int, default=d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streetsdf",
                                description="Street-scene implicit surface "
                                            "reconstruction toolkit")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add_parser("make-synth", help="generate a synthetic dataset")
    s.add_argument("--preset", required=True,
                   choices=["straight-street", "curved-street", "unit-tests"])
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--cams", type=int, default=3)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--lidar", action="store_true")
    s.add_argument("--no-masks", action="store_true")
    s.add_argument("--no-mono", action="store_true")
    s.add_argument("--mono-noise", type=float, default=0.1)
    s.add_argument("--exposure-jitter", action="store_true")
    s.add_argument("--lidar-azimuth-step", type=float, default=1.5)

    s = add_parser("train", help="train a scene from a dataset")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--resume", type=Path)
    s.add_argument("--preset", choices=["paper", "desk"], default="desk",
                   help="base config before --config/--set")

    s = add_parser("render", help="render views from a checkpoint")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--frames", type=str, default="holdout",
                   help="'holdout', 'all', or comma-separated frame ids")
    s.add_argument("--cam", type=int, default=0)

    s = add_parser("extract-mesh", help="marching-cubes surface to PLY")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--resolution", type=int, default=256)

    s = add_parser("extract-occgrid", help="occupancy voxel dump")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--cell", type=float, default=0.1)
    s.add_argument("--tau", type=float, default=None)

    s = add_parser("simulate-lidar", help="rendered range returns")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--mode", choices=["volume", "trace"], default="volume")
    s.add_argument("--frame", type=int, default=0)

    s = add_parser("eval", help="metrics report against a dataset")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--mesh-resolution", type=int, default=256)
    s.add_argument("--surface-samples", type=int, default=100000)
    return p


def _load_config(args):
    from .config import Config, desk_preset
    if getattr(args, "preset", None) == "paper":
        cfg = Config()
    else:
        cfg = desk_preset(lidar=False)
    if args.config:
        cfg = Config.load(args.config)
    cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.trainer.seed = args.seed
    if args.deterministic:
        cfg.trainer.deterministic = True
    return cfg


def _cmd_make_synth(args) -> int:
    from .synthdata import (DatasetOptions, MonoCueOptions, build_preset_scene,
                            generate_dataset)
    seed = args.seed if args.seed is not None else 0
    scene = build_preset_scene(args.preset, seed=seed, n_cams=args.cams,
                               width=args.width, height=args.height)
    mono = None if args.no_mono else MonoCueOptions(noise=args.mono_noise,
                                                    normal_noise_deg=3.0)
    opts = DatasetOptions(lidar=args.lidar, masks=not args.no_masks, mono=mono,
                          exposure_jitter=args.exposure_jitter,
                          lidar_azimuth_step_deg=args.lidar_azimuth_step,
                          seed=seed)
    generate_dataset(scene, args.out, opts)
    print(json.dumps({"dataset": str(args.out), "frames": len(scene.trajectory),
                      "cameras": len(scene.cameras)}))
    return 0


def _cmd_train(args) -> int:
    from .synthdata import load_dataset
    from .trainer import train
    cfg = _load_config(args)
    dataset = load_dataset(args.data)
    ckpt = train(dataset, cfg, args.out,
                 resume=str(args.resume) if args.resume else None)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def _parse_frames(spec: str, available, cfg):
    import numpy as np
    from .evaluation import holdout_frames
    if spec == "all":
        return list(range(available))
    if spec == "holdout":
        return [int(f) for f in holdout_frames(cfg, available)]
    return [int(tok) for tok in spec.split(",")]


def _cmd_render(args) -> int:
    import numpy as np
    from .evaluation import load_checkpoint, render_view
    from .io_formats import write_pfm, write_png
    from .synthdata import load_dataset
    dataset = load_dataset(args.data)
    fields, grid, w2s, cfg = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = _parse_frames(args.frames, dataset.n_frames, cfg)
    for f in frames:
        buf = render_view(fields, grid, w2s, cfg, dataset, f, args.cam)
        stem = f"{f:04d}_{args.cam}"
        write_png(out / f"rgb_{stem}.png", buf["rgb"])
        write_pfm(out / f"depth_{stem}.pfm", buf["depth"].astype(np.float32),
                  little_endian=False)
        write_pfm(out / f"normal_{stem}.pfm", buf["normal"].astype(np.float32),
                  little_endian=False)
    print(json.dumps({"rendered": len(frames), "out": str(out)}))
    return 0


def _cmd_extract_mesh(args) -> int:
    from .evaluation import load_checkpoint
    from .extraction import marching_cubes
    from .io_formats import write_ply_mesh
    fields, _, _, _ = load_checkpoint(args.ckpt)
    verts, normals, faces = marching_cubes(fields.sdf_value_fn(), fields.cr.aabb,
                                           args.resolution,
                                           grad_fn=fields.sdf_grad_fn())
    write_ply_mesh(args.out, verts, normals, faces)
    print(json.dumps({"vertices": int(len(verts)), "faces": int(len(faces)),
                      "mesh": str(args.out)}))
    return 0


def _cmd_extract_occgrid(args) -> int:
    from .evaluation import load_checkpoint
    from .extraction import extract_occupancy
    from .sampling import OccupancyGrid, save_occupancy
    fields, _, _, _ = load_checkpoint(args.ckpt)
    flags, res = extract_occupancy(fields.sdf_value_fn(), fields.cr.aabb,
                                   cell=args.cell, tau=args.tau)
    grid = OccupancyGrid(fields.cr.aabb, res, flags.astype("float32"),
                         threshold=0.5)
    save_occupancy(args.out, grid)
    print(json.dumps({"occupied": int(flags.sum()),
                      "resolution": [int(r) for r in res],
                      "out": str(args.out)}))
    return 0


def _cmd_simulate_lidar(args) -> int:
    import numpy as np
    from .evaluation import load_checkpoint
    from .io_formats import write_ply_points
    from .renderer import simulate_lidar
    from .space import shell_radii
    from .synthdata import lidar_beams_for_pose, load_dataset
    dataset = load_dataset(args.data)
    fields, grid, w2s, cfg = load_checkpoint(args.ckpt)
    ego = w2s.compose(dataset.ego_poses[args.frame])
    o, d = lidar_beams_for_pose(ego)
    shells = shell_radii(cfg.space.n_dv_shells, cfg.space.r_max)
    ranges, pts, hit = simulate_lidar(fields, o, d, grid, shells, cfg.sampling,
                                      mode=args.mode)
    write_ply_points(args.out, pts[hit], ranges[hit])
    print(json.dumps({"beams": int(len(o)), "returns": int(hit.sum()),
                      "out": str(args.out)}))
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import evaluate_checkpoint
    from .synthdata import load_dataset
    dataset = load_dataset(args.data)
    report = evaluate_checkpoint(args.ckpt, dataset,
                                 n_surface_samples=args.surface_samples,
                                 mesh_resolution=args.mesh_resolution)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=1)
    print(json.dumps({k: report[k] for k in ("psnr", "rmse_m")
                      if report.get(k) is not None}
                     | {"chamfer_m2": report.get("chamfer_m2"),
                        "report": str(args.out)}))
    return 0


_COMMANDS = {
    "make-synth": _cmd_make_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "extract-mesh": _cmd_extract_mesh,
    "extract-occgrid": _cmd_extract_occgrid,
    "simulate-lidar": _cmd_simulate_lidar,
    "eval": _cmd_eval,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _limit_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # surface runtime errors as machine-readable JSON
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
