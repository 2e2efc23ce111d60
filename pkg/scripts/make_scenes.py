"""Write the standard benchmark scenes to scenes/*.json.

Each file is a full SceneSpec: analytic object parameters plus the orbit
camera rig, so a run elsewhere reproduces byte-identical training data.

    python3 scripts/make_scenes.py [--out scenes]
"""

import argparse
from pathlib import Path

from sanf.scenes import make_one_sphere_scene, make_two_object_scene, save_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="scenes", help="output directory")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    builds = {
        "two_object_128.json": make_two_object_scene(128, 128),
        "two_object_64.json": make_two_object_scene(64, 64),
        "one_sphere_64.json": make_one_sphere_scene(64, 64),
    }
    for name, scene in builds.items():
        save_scene(scene, out / name)
        cams = len(scene.train_cameras), len(scene.test_cameras)
        print(f"{out / name}: {len(scene.objects)} objects, "
              f"{cams[0]} train / {cams[1]} test cameras")


if __name__ == "__main__":
    main()
