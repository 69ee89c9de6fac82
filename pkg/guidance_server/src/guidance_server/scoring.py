"""Server-side gradient assembly: noising, CFG, edit blending, encoder VJP.

The returned gradient is w(t) * (eps_hat - eps) pulled back through the image
encoder (the denoiser itself is treated as a score, never differentiated).
"""

from __future__ import annotations

import numpy as np
import torch

from .backends import Backend
from .schedule import alpha_bar, loss_weight


def _seeded_noise(shape, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(np.random.PCG64(seed))
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)


def cfg(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    return eps_uncond + scale * (eps_cond - eps_uncond)


def edit_branch_gradient(
    backend: Backend,
    image: np.ndarray,
    t: int,
    noise_seed: int,
    prompt: str,
    instruction: str | None,
    landmark,
    reference,
    cfg_scale: float,
) -> np.ndarray:
    """Single-branch gradient (used by tests to verify edit-scale endpoints)."""
    return _gradient(
        backend, image, t, noise_seed, cfg_scale,
        lambda z_t, eps_u: cfg(
            eps_u,
            backend.predict_noise(z_t, t, prompt, instruction, landmark, reference, False),
            cfg_scale,
        ),
        landmark, reference,
    )


def compute_gradient(
    backend: Backend,
    mode: str,
    image: np.ndarray,
    prompt: str,
    instruction: str | None,
    t: int,
    noise_seed: int,
    cfg_scale: float,
    edit_scale: float,
    landmark: np.ndarray | None,
    reference: np.ndarray | None,
) -> tuple[np.ndarray, float]:
    if mode == "edit" and not instruction:
        raise ValueError("edit mode requires an instruction")

    def combined(z_t, eps_u):
        if mode == "generate":
            eps_c = backend.predict_noise(z_t, t, prompt, None, landmark, reference, False)
            return cfg(eps_u, eps_c, cfg_scale)
        eps_edit = backend.predict_noise(z_t, t, prompt, instruction, landmark, reference, False)
        eps_desc = backend.predict_noise(z_t, t, prompt, None, landmark, reference, False)
        return edit_scale * cfg(eps_u, eps_edit, cfg_scale) + (1.0 - edit_scale) * cfg(
            eps_u, eps_desc, cfg_scale
        )

    grad = _gradient(backend, image, t, noise_seed, cfg_scale, combined, landmark, reference)
    return grad, loss_weight(t)


def _gradient(backend, image, t, noise_seed, cfg_scale, combine_fn, landmark, reference) -> np.ndarray:
    x = torch.tensor(np.asarray(image, dtype=np.float64), requires_grad=True)
    z = backend.encode_image(x)
    with torch.no_grad():
        eps = _seeded_noise(tuple(z.shape), noise_seed)
        ab = alpha_bar(t)
        z_t = np.sqrt(ab) * z.detach() + np.sqrt(1.0 - ab) * eps
        eps_u = backend.predict_noise(z_t, t, "", None, landmark, reference, True)
        eps_hat = combine_fn(z_t, eps_u)
        latent_grad = loss_weight(t) * (eps_hat - eps)
    z.backward(latent_grad)
    return x.grad.detach().numpy()
