"""Checkpoint-backed backend: latent diffusion + two conditioning adapters.

Requires the `real` extra (diffusers/transformers) plus downloaded weights
and a GPU; nothing here is imported unless this backend is selected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass(frozen=True)
class ServerConfig:
    base_model: str = "runwayml/stable-diffusion-v1-5"
    landmark_adapter: str = "CrucibleAI/ControlNetMediaPipeFace"
    instruct_adapter: str = "lllyasviel/control_v11e_sd15_ip2p"
    back_token: str = "<back-view>"
    back_token_file: str | None = None
    device: str = "cuda"


def load_back_token_embedding(path: str | Path) -> np.ndarray:
    """Learned-token embedding from .npy / torch containers."""
    path = Path(path)
    if path.suffix == ".npy":
        vec = np.load(path)
    else:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(payload, dict):
            payload = next(iter(payload.values()))
        vec = payload.detach().cpu().numpy()
    return np.asarray(vec, dtype=np.float64).reshape(-1)


class DiffusersBackend:
    """Wraps the VAE encoder, text encoder and adapter-conditioned U-Net."""

    def __init__(self, config: ServerConfig):
        try:
            from diffusers import AutoencoderKL, ControlNetModel, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - env without the real extra
            raise RuntimeError(
                "the checkpoint backend needs the 'real' extra (pip install 'guidance-server[real]')"
            ) from exc

        self.config = config
        self.device = torch.device(config.device)
        self.vae = AutoencoderKL.from_pretrained(config.base_model, subfolder="vae").to(self.device)
        self.unet = UNet2DConditionModel.from_pretrained(config.base_model, subfolder="unet").to(self.device)
        self.tokenizer = CLIPTokenizer.from_pretrained(config.base_model, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(config.base_model, subfolder="text_encoder").to(
            self.device
        )
        self.landmark_net = ControlNetModel.from_pretrained(config.landmark_adapter).to(self.device)
        self.instruct_net = ControlNetModel.from_pretrained(config.instruct_adapter).to(self.device)
        for module in (self.vae, self.unet, self.text_encoder, self.landmark_net, self.instruct_net):
            module.requires_grad_(False)
        self.text_width = self.text_encoder.get_input_embeddings().weight.shape[1]
        if config.back_token_file:
            self.register_token(config.back_token, load_back_token_embedding(config.back_token_file))

    def register_token(self, token: str, embedding: np.ndarray) -> None:
        if embedding.shape != (self.text_width,):
            raise ValueError(
                f"token embedding width {embedding.shape} does not match text encoder width {self.text_width}"
            )
        self.tokenizer.add_tokens([token])
        self.text_encoder.resize_token_embeddings(len(self.tokenizer))
        token_id = self.tokenizer.convert_tokens_to_ids(token)
        with torch.no_grad():
            self.text_encoder.get_input_embeddings().weight[token_id] = torch.tensor(
                embedding, dtype=self.text_encoder.dtype, device=self.device
            )

    def _embed(self, text: str) -> torch.Tensor:
        tokens = self.tokenizer(
            text, padding="max_length", max_length=self.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        ).input_ids.to(self.device)
        return self.text_encoder(tokens)[0]

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        x = image.permute(2, 0, 1)[None].to(self.device, torch.float32) * 2.0 - 1.0
        posterior = self.vae.encode(x).latent_dist
        return posterior.mean * self.vae.config.scaling_factor

    def _adapter_residuals(self, net, z_t, temb, cond_image):
        cond = torch.tensor(cond_image, dtype=torch.float32, device=self.device)
        cond = cond.permute(2, 0, 1)[None]
        down, mid = net(z_t, temb, encoder_hidden_states=self._uncond_emb, controlnet_cond=cond, return_dict=False)
        return down, mid

    def predict_noise(self, z_t, t, prompt, instruction, landmark, reference, unconditional):
        with torch.no_grad():
            emb = self._embed("" if unconditional else (instruction or prompt))
            self._uncond_emb = emb
            z = z_t[None].to(self.device, torch.float32) if z_t.ndim == 3 else z_t.to(self.device, torch.float32)
            tt = torch.tensor([t], device=self.device)
            down = mid = None
            if landmark is not None:
                down, mid = self._adapter_residuals(self.landmark_net, z, tt, landmark)
            if instruction is not None and reference is not None:
                d2, m2 = self._adapter_residuals(self.instruct_net, z, tt, reference)
                down = d2 if down is None else [a + b for a, b in zip(down, d2)]
                mid = m2 if mid is None else mid + m2
            eps = self.unet(
                z, tt, encoder_hidden_states=emb,
                down_block_additional_residuals=down, mid_block_additional_residual=mid,
            ).sample
            return eps[0].to(torch.float64).cpu()
