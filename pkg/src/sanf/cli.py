"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 2 usage (bad flags, missing files), 3 contract
violation (invalid config/inputs), 4 empty surface (mesh extraction found
no geometry), 5 divergence (training aborted on non-finite loss). Errors
print one message to stderr, never a stack trace.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractViolation, DivergenceError, EmptySurfaceError, UsageError
from .mesh import extract_mesh, load_obj, load_ply, save_obj, save_ply
from .scenes import load_scene
from .teacher import TeacherModel, build_teacher
from .trainer import (TrainConfig, benchmark_inference, evaluate, evaluate_iou,
                      train_nerf, train_semantic)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONTRACT = 3
EXIT_EMPTY_SURFACE = 4
EXIT_DIVERGENCE = 5


def _load_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = getattr(args, "override", None) or []
    if not overrides:
        return config
    data = config.to_json()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        try:
            data[key] = json.loads(raw)
        except json.JSONDecodeError:
            data[key] = raw
    return TrainConfig.from_json(data)


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_checkpoint_for(args, need_sem: bool = False):
    ck = load_checkpoint(args.checkpoint)
    if need_sem and ck.sem is None:
        raise ContractViolation(
            f"{args.checkpoint} has no semantic field; run train-features first")
    if need_sem and ck.teacher_spec is None:
        raise ContractViolation(f"{args.checkpoint} has no teacher spec")
    return ck


def _mesh_io(path: str):
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        return save_obj, load_obj
    if ext == ".ply":
        return save_ply, load_ply
    raise ContractViolation(f"mesh path {path!r} must end in .obj or .ply")


# ------------------------------------------------------------- subcommands


def cmd_train_nerf(args) -> int:
    scene = load_scene(args.scene)
    config = _load_config(args)
    result = train_nerf(scene, config)
    save_checkpoint(args.out, result.field, scene, config=config)
    print(f"trained {config.nerf_steps} steps, held-out psnr {result.final_psnr:.2f} dB "
          f"-> {args.out}")
    return EXIT_OK


def cmd_train_features(args) -> int:
    ck = _load_checkpoint_for(args)
    config = _load_config(args)
    teacher = build_teacher(args.teacher, scene=ck.scene,
                            cost_multiplier=config.cost_multiplier)
    result = train_semantic(ck.base, None, teacher, ck.scene, config,
                            log_csv=args.log_csv, final_eval=True)
    out = args.out or args.checkpoint
    save_checkpoint(out, ck.base, ck.scene, sem=result.sem,
                    teacher_spec=teacher.spec, config=config)
    report = result.report.to_json() if result.report else {}
    if args.report:
        _write_json(report, args.report)
    iou = report.get("clickIouMean", report.get("promptIouMean"))
    iou_text = f"{iou:.3f}" if iou is not None else "n/a"
    print(f"imitated {config.sem_steps} steps ({args.teacher} teacher), "
          f"mask IoU {iou_text} -> {out}")
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    ck = _load_checkpoint_for(args)
    save_fn, _ = _mesh_io(args.out)
    mesh = extract_mesh(ck.base, resolution=args.resolution, sigma_threshold=args.sigma)
    if mesh.is_empty:
        raise EmptySurfaceError(
            f"no surface at sigma threshold {args.sigma}; lower --sigma or train longer")
    save_fn(mesh, args.out)
    print(f"extracted {mesh.n_triangles} triangles / {mesh.n_vertices} vertices -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_checkpoint_for(args, need_sem=True)
    config = _load_config(args)
    teacher = TeacherModel(ck.teacher_spec)
    report = evaluate(ck.base, ck.sem, teacher, ck.scene, config)
    _write_json(report.to_json(), args.out)
    if args.csv:
        rows = evaluate_iou(ck.base, ck.sem, teacher, ck.scene,
                            n_samples=config.samples_per_ray)["rows"]
        with open(args.csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["view", "probe", "iou"])
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def cmd_bench(args) -> int:
    ck = _load_checkpoint_for(args, need_sem=True)
    spec = dataclasses.replace(ck.teacher_spec, cost_multiplier=args.cost_multiplier)
    teacher = TeacherModel(spec)
    timing = benchmark_inference(ck.base, ck.sem, teacher, ck.scene, reps=args.reps)
    _write_json(timing, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    ck = _load_checkpoint_for(args, need_sem=True)
    mesh = None
    if args.mesh:
        _, load_fn = _mesh_io(args.mesh)
        mesh = load_fn(args.mesh)
    app = create_app(ck, mesh=mesh)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sanf",
        description="Train, evaluate, and serve segmentable radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="JSON config file (TrainConfig fields)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override one config field (JSON-typed value); repeatable")

    p = sub.add_parser("train-nerf", help="fit the radiance field to a scene")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_nerf)

    p = sub.add_parser("train-features", help="distill teacher features into a semantic grid")
    p.add_argument("--checkpoint", required=True, help="checkpoint from train-nerf")
    p.add_argument("--teacher", required=True, choices=["single", "multi"])
    p.add_argument("--out", help="output checkpoint (default: augment in place)")
    p.add_argument("--report", help="write the final EvalReport JSON here")
    p.add_argument("--log-csv", help="append per-eval metric rows to this CSV")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_features)

    p = sub.add_parser("extract-mesh", help="marching-cubes mesh from the density field")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--sigma", type=float, default=5.0, help="density iso threshold")
    p.add_argument("--out", required=True, help=".obj or .ply path")
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("eval", help="PSNR, feature MSE, and mask-IoU protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="EvalReport JSON path (default: stdout)")
    p.add_argument("--csv", help="write per-probe IoU rows here")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage inference timing table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cost-multiplier", type=int, default=1,
                   help="teacher encode cost factor emulating a heavy backbone")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", help="timing JSON path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="HTTP service for the viewer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", help="attach a mesh (.obj/.ply) for projection endpoints")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=int(os.environ.get("SANF_PORT", "8000")))
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except EmptySurfaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY_SURFACE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
