"""Mock-provider coarse run against a fixed textured stand-in render.

Optimizes the neural field so its renders converge to a rasterized target,
logging image MSE per snapshot. Useful as a fast end-to-end sanity run that
needs no pretrained checkpoints or GPU.

    python scripts/coarse_smoke.py --out /tmp/smoke --iterations 150
"""

import argparse
from pathlib import Path

import numpy as np

from headforge.camera import CameraPose, CameraRanges, generate_rays
from headforge.config import FieldSettings, RenderSettings, RunConfig, StageSettings
from headforge.guidance import LocalScoreProvider, MockNoisePredictor, PromptSet
from headforge.head_prior import PriorField, make_standin_head, ray_mesh_first_hit
from headforge.images import save_png
from headforge.pipeline import checkpoint_save, make_schedule, run_coarse
from headforge.renderer import render_image


def textured_target(head, pose, res):
    origins, dirs = generate_rays(pose, res, res)
    o, d = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    t_hit = ray_mesh_first_hit(head, o, d)
    hit = np.isfinite(t_hit)
    pts = o + np.where(hit, t_hit, 0.0)[:, None] * d
    img = np.ones((res * res, 3))
    img[hit] = 0.5 + 0.5 * pts[hit] / np.linalg.norm(pts[hit], axis=1, keepdims=True)
    return img.reshape(res, res, 3)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--iterations", type=int, default=150)
    ap.add_argument("--resolution", type=int, default=16)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    head = make_standin_head(2)
    prior = PriorField(head)
    pose = CameraPose(0.0, 85.0, 1.25, 45.0)
    target = textured_target(head, pose, args.resolution)
    save_png(out / "target.png", target)

    config = RunConfig(
        camera=CameraRanges((85, 85), (1.25, 1.25), (45, 45)),
        render=RenderSettings(n_samples=24, background="white", prior_grid_res=64),
        field_cfg=FieldSettings(table_size_log2=11, base_resolution=4, max_resolution=64),
        coarse=StageSettings(args.iterations, args.resolution, lr_field=1e-2, batch_size=1, seed=args.seed),
    )
    schedule = make_schedule(config)
    provider = LocalScoreProvider(MockNoisePredictor(target, schedule), schedule)
    state = run_coarse(PromptSet("a textured head"), prior, config, provider, out_dir=out)

    final = render_image(
        state.params, prior, pose, args.resolution, args.resolution,
        background=(1, 1, 1), rng=None, jitter=False, n_samples=24, prior_grid_res=64,
    )
    save_png(out / "final.png", final.rgb)
    mse = float(((final.rgb - target) ** 2).mean())
    checkpoint_save(state, out / "coarse.hsck")
    print(f"final MSE to target after {args.iterations} iterations: {mse:.5f}")


if __name__ == "__main__":
    main()
