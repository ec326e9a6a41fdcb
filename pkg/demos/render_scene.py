"""Generate one scene, save its frames as PPM images and its voxels as PLY."""
import argparse
from pathlib import Path

import numpy as np

from occforge import export_ply, generate_scene


def write_ppm(path, image):
    rgb = (np.clip(image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6 {w} {h} 255\n".encode() + rgb.tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--preset", default="toy")
    ap.add_argument("--out", default="scene_out")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(args.seed, args.preset)
    for i, image in enumerate(scene.images):
        write_ppm(out / f"frame_{i}.ppm", image)
    export_ply(scene.labels, out / "scene.ply", scene.spec.resolution, scene.spec.origin)
    print(f"wrote {scene.num_frames} frames and scene.ply to {out}/")


if __name__ == "__main__":
    main()
