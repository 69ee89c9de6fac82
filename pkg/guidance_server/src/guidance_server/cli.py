"""Run the guidance service: `guidance-server --port 8100 --backend synthetic`."""

from __future__ import annotations

import argparse


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="guidance-server", description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8100)
    parser.add_argument("--backend", choices=("synthetic", "diffusers"), default="synthetic")
    parser.add_argument("--device", default="cuda")
    parser.add_argument("--base-model", default="runwayml/stable-diffusion-v1-5")
    parser.add_argument("--landmark-adapter", default="CrucibleAI/ControlNetMediaPipeFace")
    parser.add_argument("--instruct-adapter", default="lllyasviel/control_v11e_sd15_ip2p")
    parser.add_argument("--back-token", default="<back-view>")
    parser.add_argument("--back-token-file", default=None, help="learned token embedding (.npy/.pt)")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    if args.backend == "synthetic":
        from .backends import SyntheticBackend

        backend = SyntheticBackend()
        if args.back_token_file:
            from .diffusers_backend import load_back_token_embedding

            backend.register_token(args.back_token, load_back_token_embedding(args.back_token_file))
    else:
        from .diffusers_backend import DiffusersBackend, ServerConfig

        backend = DiffusersBackend(
            ServerConfig(
                base_model=args.base_model,
                landmark_adapter=args.landmark_adapter,
                instruct_adapter=args.instruct_adapter,
                back_token=args.back_token,
                back_token_file=args.back_token_file,
                device=args.device,
            )
        )

    import uvicorn

    from .app import create_app

    uvicorn.run(create_app(backend), host=args.host, port=args.port, workers=args.workers)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
