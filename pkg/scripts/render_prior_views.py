"""Render the head prior and its landmark maps from a sweep of azimuths.

Writes side-by-side prior renders and landmark conditioning maps, which is
the quickest way to eyeball camera conventions, view buckets and occlusion.

    python scripts/render_prior_views.py --out /tmp/views
"""

import argparse
from pathlib import Path

import numpy as np

from headforge.camera import CameraPose, LandmarkStyle, render_landmark_map, view_bucket
from headforge.head_prior import PriorField, load_mesh, make_standin_head
from headforge.images import save_png
from headforge.renderer import render_image


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--prior", default="standin", help="OBJ path or 'standin'")
    ap.add_argument("--resolution", type=int, default=192)
    ap.add_argument("--azimuths", type=int, default=8)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    mesh = make_standin_head(2) if args.prior == "standin" else load_mesh(args.prior)
    prior = PriorField(mesh)
    style = LandmarkStyle()

    for i in range(args.azimuths):
        az = 360.0 * i / args.azimuths
        pose = CameraPose(az, 80.0, 1.25, 45.0)
        render = render_image(
            None, prior, pose, args.resolution, args.resolution,
            background=(1, 1, 1), rng=None, jitter=False, n_samples=96, compute_normals=True,
        )
        landmarks = render_landmark_map(mesh, pose, style, args.resolution, args.resolution)
        bucket = view_bucket(az).value
        save_png(out / f"az{az:05.1f}_{bucket}_render.png", render.rgb)
        save_png(out / f"az{az:05.1f}_{bucket}_normal.png", 0.5 * (render.normal + 1.0))
        save_png(out / f"az{az:05.1f}_{bucket}_landmarks.png", landmarks)
        print(f"azimuth {az:5.1f} -> bucket {bucket}, {int((landmarks.sum(axis=2) > 0).sum())} landmark px")


if __name__ == "__main__":
    main()
