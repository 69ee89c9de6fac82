"""Command line interface: generate / refine / edit / export-mesh / turntable."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import CameraPose
from .config import RunConfig, load_config
from .guidance import PromptSet
from .head_prior import PriorField, load_mesh, make_standin_head
from .pipeline import (
    checkpoint_load,
    checkpoint_save,
    export_textured_mesh,
    make_provider,
    make_schedule,
    render_turntable,
    run_coarse,
    run_edit,
    run_fine,
)
from .renderer import render_image


def _load_prior(spec: str) -> PriorField:
    if spec == "standin":
        return PriorField(make_standin_head(2))
    return PriorField(load_mesh(spec))


def _mock_target(prior: PriorField, config: RunConfig, resolution: int) -> np.ndarray:
    pose = CameraPose(0.0, 85.0, sum(config.camera.radius_range) / 2, 45.0)
    out = render_image(
        None, prior, pose, resolution, resolution, background=(1, 1, 1),
        rng=None, jitter=False, prior_grid_res=config.render.prior_grid_res,
    )
    return out.rgb.astype(np.float64)


def _provider_for(config: RunConfig, prior: PriorField, resolution: int):
    schedule = make_schedule(config)
    target = _mock_target(prior, config, resolution) if config.guidance.provider == "mock" else None
    return make_provider(config, schedule, mock_target=target)


def cmd_generate(args) -> int:
    config = load_config(args.config)
    if args.iterations:
        config = replace(config, coarse=replace(config.coarse, iterations=args.iterations))
    if args.seed is not None:
        config = replace(config, coarse=replace(config.coarse, seed=args.seed))
    prior = _load_prior(args.prior)
    prompts = PromptSet(base_prompt=args.prompt, back_token=config.guidance.back_token)
    provider = _provider_for(config, prior, config.coarse.resolution)
    out = Path(args.out)
    state = run_coarse(prompts, prior, config, provider, out_dir=out)
    checkpoint_save(state, out / "coarse.hsck")
    print(f"coarse stage finished at iteration {state.iteration}; checkpoint {out / 'coarse.hsck'}")
    return 0


def cmd_refine(args) -> int:
    config = load_config(args.config)
    if args.iterations:
        config = replace(config, fine=replace(config.fine, iterations=args.iterations))
    coarse = checkpoint_load(args.from_ckpt, config)
    base = args.prompt or coarse.base_prompt
    if not base:
        print("error: checkpoint carries no prompt; pass --prompt", file=sys.stderr)
        return 2
    prompts = PromptSet(base_prompt=base, back_token=config.guidance.back_token)
    provider = _provider_for(config, coarse.prior, config.fine.resolution)
    out = Path(args.out)
    state = run_fine(coarse, prompts, config, provider, out_dir=out)
    checkpoint_save(state, out / "fine.hsck")
    print(f"fine stage finished at iteration {state.iteration}; checkpoint {out / 'fine.hsck'}")
    return 0


def cmd_edit(args) -> int:
    config = load_config(args.config)
    if args.edit_scale is not None:
        config = replace(config, guidance=replace(config.guidance, edit_scale=args.edit_scale))
    if args.iterations:
        config = replace(config, edit=replace(config.edit, iterations=args.iterations))
    coarse = checkpoint_load(args.from_ckpt, config)
    base = args.prompt or coarse.base_prompt
    if not base:
        print("error: checkpoint carries no prompt; pass --prompt", file=sys.stderr)
        return 2
    prompts = PromptSet(
        base_prompt=base, edit_instruction=args.instruction,
        back_token=config.guidance.back_token,
    )
    provider = _provider_for(config, coarse.prior, config.edit.resolution)
    out = Path(args.out)
    state = run_edit(coarse, prompts, config, provider, out_dir=out)
    checkpoint_save(state, out / "edit.hsck")
    print(f"edit stage finished at iteration {state.iteration}; checkpoint {out / 'edit.hsck'}")
    return 0


def cmd_export_mesh(args) -> int:
    state = checkpoint_load(args.from_ckpt, load_config(args.config))
    mesh = export_textured_mesh(state, args.out)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces to {args.out}")
    return 0


def cmd_turntable(args) -> int:
    state = checkpoint_load(args.from_ckpt, load_config(args.config))
    render_turntable(state, args.frames, out_dir=args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="headforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="coarse-stage generation from a text prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--prior", default="standin", help="OBJ path, or 'standin'")
    p.add_argument("--config", default=None, help="run.toml")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("refine", help="fine-stage refinement from a coarse checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--prompt", default=None, help="defaults to the checkpoint's prompt")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("edit", help="identity-aware editing from a coarse checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--prompt", default=None, help="defaults to the checkpoint's prompt")
    p.add_argument("--instruction", required=True)
    p.add_argument("--edit-scale", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("export-mesh", help="extract and export the textured surface")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("turntable", help="render an azimuth sweep of a checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_turntable)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
