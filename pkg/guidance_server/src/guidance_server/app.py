"""FastAPI application speaking wire protocol v1."""

from __future__ import annotations

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .backends import Backend, SyntheticBackend
from .protocol import MODES, PROTOCOL_VERSION, ScoreBody, decode_png, decode_tensor, encode_tensor
from .schedule import NUM_STEPS
from .scoring import compute_gradient


def create_app(backend: Backend | None = None) -> FastAPI:
    app = FastAPI(title="guidance-server")
    app.state.backend = backend or SyntheticBackend()

    @app.exception_handler(RequestValidationError)
    async def _validation_to_400(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first.get("loc", ()) if p not in ("body",))
        return JSONResponse(
            status_code=400, content={"detail": first.get("msg", "invalid body"), "field": field or "body"}
        )

    def bad_request(field: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": message, "field": field})

    @app.get("/health")
    def health():
        return {"protocol": PROTOCOL_VERSION, "modes": list(MODES)}

    @app.post("/score")
    def score(body: ScoreBody):
        try:
            image = decode_tensor(body.image)
        except ValueError as exc:
            return bad_request("image", str(exc))
        if image.ndim != 3 or image.shape[-1] != 3:
            return bad_request("image", f"image must be (H, W, 3), got {list(image.shape)}")
        if not np.isfinite(image).all():
            return bad_request("image", "image contains non-finite values")
        if body.timestep >= NUM_STEPS:
            return bad_request("timestep", f"timestep must be < {NUM_STEPS}")

        conditioning = {}
        for field in ("landmark_png_b64", "reference_png_b64"):
            try:
                arr = decode_png(getattr(body, field))
            except Exception as exc:
                return bad_request(field, f"invalid PNG payload: {exc}")
            if arr is not None and arr.shape[:2] != image.shape[:2]:
                return bad_request(
                    field, f"conditioning resolution {arr.shape[:2]} != image {image.shape[:2]}"
                )
            conditioning[field] = arr
        if body.mode == "edit" and not body.instruction:
            return bad_request("instruction", "edit mode requires an instruction")

        try:
            grad, w_t = compute_gradient(
                app.state.backend,
                body.mode,
                image,
                body.prompt,
                body.instruction,
                body.timestep,
                body.noise_seed,
                body.cfg_scale,
                body.edit_scale,
                conditioning["landmark_png_b64"],
                conditioning["reference_png_b64"],
            )
        except torch.cuda.OutOfMemoryError:
            return JSONResponse(
                status_code=503,
                content={"detail": "out of memory, retry later"},
                headers={"Retry-After": "5"},
            )
        return {"gradient": encode_tensor(grad), "w_t": w_t}

    return app
