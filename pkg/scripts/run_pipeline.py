"""Full pipeline on one scene: radiance field -> feature imitation -> mesh
-> evaluation -> timing table, all through the public CLI so the run matches
what a user would type.

    python3 scripts/run_pipeline.py --preset reduced --teacher single
    python3 scripts/run_pipeline.py --preset desk --teacher multi --workdir runs/desk

The reduced preset (64x64 scene, shorter schedules) finishes in minutes on a
laptop CPU; desk is the full-size configuration.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from sanf.cli import main as sanf
from sanf.scenes import make_two_object_scene, save_scene

PRESETS = {
    "desk": {"scene_size": 128, "overrides": {}},
    "reduced": {
        "scene_size": 64,
        "overrides": {"nerfSteps": 1200, "raysPerStep": 2048, "semSteps": 600,
                      "imageSize": 64, "evalEvery": 200},
    },
}


def run(argv):
    print(f"\n$ sanf {' '.join(argv)}")
    t0 = time.perf_counter()
    code = sanf(argv)
    print(f"  [{time.perf_counter() - t0:.1f}s, exit {code}]")
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="reduced")
    ap.add_argument("--teacher", choices=["single", "multi"], default="single")
    ap.add_argument("--workdir", default=None, help="default: runs/<preset>")
    ap.add_argument("--cost-multiplier", type=int, default=1,
                    help="emulated feature-encoder cost for the timing table")
    args = ap.parse_args()

    preset = PRESETS[args.preset]
    work = Path(args.workdir or f"runs/{args.preset}")
    work.mkdir(parents=True, exist_ok=True)
    over = []
    for key, value in preset["overrides"].items():
        over += ["--override", f"{key}={json.dumps(value)}"]

    scene = work / "scene.json"
    save_scene(make_two_object_scene(preset["scene_size"], preset["scene_size"]), scene)

    ck = work / "model.sanf"
    run(["train-nerf", "--scene", str(scene), "--out", str(ck)] + over)
    run(["train-features", "--checkpoint", str(ck), "--teacher", args.teacher,
         "--report", str(work / "report.json"),
         "--log-csv", str(work / "train_log.csv")] + over)
    run(["extract-mesh", "--checkpoint", str(ck), "--out", str(work / "surface.obj")])
    run(["eval", "--checkpoint", str(ck), "--out", str(work / "eval.json"),
         "--csv", str(work / "probes.csv")] + over)
    run(["bench", "--checkpoint", str(ck), "--cost-multiplier", str(args.cost_multiplier),
         "--out", str(work / "timing.json")])

    print(f"\nartifacts in {work}/; serve with:\n"
          f"  sanf serve --checkpoint {ck} --mesh {work / 'surface.obj'}")


if __name__ == "__main__":
    main()
