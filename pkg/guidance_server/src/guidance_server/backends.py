"""Score backends: the model interface plus a deterministic synthetic one.

A backend owns the image encoder (differentiable, so the service can push
latent gradients back to pixels) and the conditioned noise prediction. The
synthetic backend is a small fixed-weight network: fast, CPU-only and fully
deterministic, which is what the protocol conformance suite runs against.
The checkpoint-backed implementation lives in `diffusers_backend`.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
import torch


class Backend(Protocol):
    text_width: int

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) image -> latent tensor; must be torch-differentiable."""

    def predict_noise(
        self,
        z_t: torch.Tensor,
        t: int,
        prompt: str,
        instruction: str | None,
        landmark: np.ndarray | None,
        reference: np.ndarray | None,
        unconditional: bool,
    ) -> torch.Tensor:
        ...

    def register_token(self, token: str, embedding: np.ndarray) -> None:
        ...


def _fixed(shape, seed):
    rng = np.random.default_rng(np.random.PCG64(seed))
    return torch.tensor(rng.standard_normal(shape) / np.sqrt(np.prod(shape[:-1]) or 1.0), dtype=torch.float64)


def _token_vec(token: str, width: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode()).digest()
    rng = np.random.default_rng(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    return rng.standard_normal(width) / np.sqrt(width)


class SyntheticBackend:
    """Fixed random projections standing in for pretrained checkpoints.

    Latents are 4-channel half-resolution features through a smooth encoder;
    the noise prediction is a deterministic function of the noisy latent, the
    timestep and every conditioning channel, so conditioning ablations move
    the output and seeded requests replay bit-identically.
    """

    text_width = 64

    def __init__(self):
        self.w_enc = _fixed((3, 4), seed=101)
        self.b_enc = _fixed((4,), seed=102) * 0.1
        self.w_prompt = _fixed((self.text_width, 4), seed=103)
        self.w_landmark = _fixed((3, 4), seed=104)
        self.w_reference = _fixed((3, 4), seed=105)
        self.w_instruction = _fixed((self.text_width, 4), seed=106)
        self._token_overrides: dict[str, np.ndarray] = {}

    # --- encoder -----------------------------------------------------------

    @staticmethod
    def _pool2(img: torch.Tensor) -> torch.Tensor:
        h, w, c = img.shape
        h2, w2 = h // 2 * 2, w // 2 * 2
        img = img[:h2, :w2]
        return img.reshape(h2 // 2, 2, w2 // 2, 2, c).mean(dim=(1, 3))

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        pooled = self._pool2(image)
        return torch.tanh(pooled @ self.w_enc + self.b_enc)

    # --- text --------------------------------------------------------------

    def register_token(self, token: str, embedding: np.ndarray) -> None:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.text_width,):
            raise ValueError(
                f"token embedding must have width {self.text_width}, got {embedding.shape}"
            )
        self._token_overrides[token] = embedding

    def _embed_text(self, text: str | None) -> torch.Tensor:
        if not text:
            return torch.zeros(self.text_width, dtype=torch.float64)
        vecs = [
            self._token_overrides.get(tok, _token_vec(tok, self.text_width))
            for tok in text.split()
        ]
        return torch.tensor(np.mean(vecs, axis=0), dtype=torch.float64)

    # --- denoiser ----------------------------------------------------------

    def predict_noise(self, z_t, t, prompt, instruction, landmark, reference, unconditional):
        temb = 0.5 + 0.5 * np.sin(t / 1000.0 * np.pi)
        out = 0.9 * z_t * temb
        if not unconditional:
            out = out + 0.05 * (self._embed_text(prompt) @ self.w_prompt)
        if landmark is not None:
            lm = self._pool2(torch.tensor(landmark, dtype=torch.float64))
            out = out + 0.05 * (lm @ self.w_landmark)
        if reference is not None:
            ref = self._pool2(torch.tensor(reference, dtype=torch.float64))
            out = out + 0.05 * (ref @ self.w_reference)
        if instruction:
            out = out + 0.05 * (self._embed_text(instruction) @ self.w_instruction)
        return out
