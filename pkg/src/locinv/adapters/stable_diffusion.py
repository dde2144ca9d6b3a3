"""Stable Diffusion v1.x adapter built on diffusers / transformers (imported lazily).

Cross- and self-attention of the 16x16 blocks are captured through a custom
attention processor that materializes the softmax weights. The text encoder is
re-run from token embeddings so individual prompt slots can be replaced.
"""
from __future__ import annotations

import logging
import os
import threading
from typing import Mapping, Optional

import torch

from ..errors import InputError, LocInvError
from .base import (AdapterSpec, AttentionEdit, AttentionLayer, AttentionSink,
                   ConditioningEmbedding, apply_overrides, state_checksum)

log = logging.getLogger(__name__)

DEFAULT_MODEL = "stable-diffusion-v1-5/stable-diffusion-v1-5"
LATENT_SCALE = 0.18215
CAPTURE_RESOLUTION = 16


def _require_diffusers():
    try:
        import diffusers  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise LocInvError("the stable-diffusion adapter needs `pip install diffusers transformers`"
                          ) from exc


def cache_dir() -> Optional[str]:
    return os.environ.get("LOCINV_CACHE")


class CLIPWordTokenizer:
    """CLIP BPE tokenizer with word -> context position bookkeeping."""

    def __init__(self, clip_tokenizer):
        self.clip = clip_tokenizer
        self.context_length = clip_tokenizer.model_max_length

    def words(self, prompt: str) -> list[str]:
        return prompt.lower().split()

    def word_pieces(self, prompt: str) -> list[tuple[str, list[int]]]:
        out, pos = [], 1
        for word in self.words(prompt):
            n = len(self.clip(word, add_special_tokens=False).input_ids)
            out.append((word, list(range(pos, pos + n))))
            pos += n
        if pos >= self.context_length:
            raise InputError(f"prompt {prompt!r} exceeds context length {self.context_length}")
        return out

    def encode(self, prompt: str) -> list[int]:
        self.word_pieces(prompt)
        return self.clip(prompt.lower(), padding="max_length", max_length=self.context_length,
                         truncation=True).input_ids

    def decode(self, ids) -> str:
        return self.clip.decode(ids, skip_special_tokens=True)


def _layer_resolution(name: str, latent_size: int) -> int:
    parts = name.split(".")
    if parts[0] == "mid_block":
        return latent_size // 8
    block = int(parts[1])
    if parts[0] == "down_blocks":
        return latent_size // (2 ** block)
    return latent_size // (2 ** (3 - block))


class _Processor:
    """Attention processor that exposes and optionally rewrites the softmax weights."""

    def __init__(self, owner: "StableDiffusionAdapter", layer_id: str, resolution: int, kind: str):
        self.owner = owner
        self.layer_id = layer_id
        self.resolution = resolution
        self.kind = kind

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None,
                 temb=None, *args, **kwargs):
        residual = hidden_states
        ndim = hidden_states.ndim
        if ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch = hidden_states.shape[0]
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        query = attn.to_q(hidden_states)
        ctx = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        if encoder_hidden_states is not None and attn.norm_cross:
            ctx = attn.norm_encoder_hidden_states(ctx)
        key, value = attn.to_k(ctx), attn.to_v(ctx)
        q, k, v = (attn.head_to_batch_dim(x) for x in (query, key, value))
        probs = attn.get_attention_scores(q, k, attention_mask)
        n, m = probs.shape[-2:]
        probs = probs.view(batch, -1, n, m)
        state = self.owner._call_state()
        if state.get("capture") is not None and batch == 1:
            state["capture"].record(self.layer_id, self.resolution, probs[0], self.kind)
        if state.get("edit") is not None:
            probs = state["edit"](self.layer_id, self.kind, probs)
        out = torch.bmm(probs.reshape(-1, n, m), v)
        out = attn.batch_to_head_dim(out)
        out = attn.to_out[1](attn.to_out[0](out))
        if ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class StableDiffusionAdapter:
    kind = "stable-diffusion"

    def __init__(self, vae, unet, text_encoder, clip_tokenizer, device="cpu", checkpoint=""):
        self.device = torch.device(device)
        self.vae, self.unet, self.text_encoder = vae, unet, text_encoder
        for module in (vae, unet, text_encoder):
            module.to(self.device).eval()
            for p in module.parameters():
                p.requires_grad_(False)
        self.tokenizer = CLIPWordTokenizer(clip_tokenizer)
        self.checkpoint = checkpoint
        size = unet.config.sample_size
        layers, processors = [], {}
        for name in unet.attn_processors:
            res = _layer_resolution(name, size)
            kind = "self" if ".attn1." in name else "cross"
            if res == CAPTURE_RESOLUTION:
                layer_id = name.rsplit(".processor", 1)[0]
                layers.append(AttentionLayer(layer_id, res, kind))
                processors[name] = _Processor(self, layer_id, res, kind)
            else:
                processors[name] = unet.attn_processors[name]
        unet.set_attn_processor(processors)
        self.spec = AdapterSpec(
            latent_shape=(4, size, size),
            attention_layers=tuple(layers),
            d_text=text_encoder.config.hidden_size,
            context_length=self.tokenizer.context_length,
            image_size=size * 8,
            codec_tolerance=0.1,
            attention_resolution=CAPTURE_RESOLUTION,
        )
        self._local = threading.local()
        self._checksum = None
        self._check_text_path()

    @classmethod
    def load(cls, checkpoint: Optional[str] = None, device: str = "cpu") -> "StableDiffusionAdapter":
        _require_diffusers()
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        source = checkpoint or DEFAULT_MODEL
        kw = {"cache_dir": cache_dir()}
        vae = AutoencoderKL.from_pretrained(source, subfolder="vae", **kw)
        unet = UNet2DConditionModel.from_pretrained(source, subfolder="unet", **kw)
        text = CLIPTextModel.from_pretrained(source, subfolder="text_encoder", **kw)
        tok = CLIPTokenizer.from_pretrained(source, subfolder="tokenizer", **kw)
        return cls(vae, unet, text, tok, device, source)

    def _call_state(self) -> dict:
        return getattr(self._local, "state", {})

    def checksum(self) -> str:
        if self._checksum is None:
            self._checksum = state_checksum(self.unet)
        return self._checksum

    def token_embeddings(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long, device=self.device)
        return self.text_encoder.get_input_embeddings()(ids)

    def _encode_embeds(self, embeds: torch.Tensor) -> torch.Tensor:
        tm = self.text_encoder.text_model
        hidden = tm.embeddings(inputs_embeds=embeds[None])
        L = embeds.shape[0]
        causal = torch.full((L, L), torch.finfo(hidden.dtype).min, device=hidden.device).triu(1)
        out = tm.encoder(inputs_embeds=hidden, causal_attention_mask=causal[None, None])
        last = out[0] if isinstance(out, tuple) else out.last_hidden_state
        return tm.final_layer_norm(last)[0]

    def _check_text_path(self):
        ids = self.tokenizer.encode("a photo")
        with torch.no_grad():
            ref = self.text_encoder(torch.tensor([ids], device=self.device))[0][0]
            ours = self._encode_embeds(self.token_embeddings(ids))
        if (ref - ours).abs().max() > 1e-3:
            raise LocInvError("text encoder re-implementation disagrees with transformers; "
                              "unsupported transformers version")

    def encode_text(self, prompt, embedding_overrides: Optional[Mapping[int, torch.Tensor]] = None
                    ) -> ConditioningEmbedding:
        ids = self.tokenizer.encode(prompt) if isinstance(prompt, str) else list(prompt)
        if len(ids) != self.spec.context_length:
            raise InputError(f"expected {self.spec.context_length} token ids, got {len(ids)}")
        embeds = apply_overrides(self.token_embeddings(ids), embedding_overrides,
                                 self.spec.context_length)
        return ConditioningEmbedding(self._encode_embeds(embeds), tuple(ids))

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        image = torch.as_tensor(image, dtype=torch.float32, device=self.device)
        size = self.spec.image_size
        if tuple(image.shape) != (3, size, size):
            raise InputError(f"expected a 3x{size}x{size} image, got {tuple(image.shape)}")
        with torch.no_grad():
            dist = self.vae.encode(image[None] * 2 - 1).latent_dist
        return dist.mean[0] * LATENT_SCALE

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            x = self.vae.decode(z[None] / LATENT_SCALE).sample[0]
        return ((x + 1) / 2).clamp(0, 1)

    def predict_noise(self, z, timestep, cond: ConditioningEmbedding,
                      capture: Optional[AttentionSink] = None,
                      attention_edit: Optional[AttentionEdit] = None) -> torch.Tensor:
        if tuple(z.shape) != self.spec.latent_shape:
            raise InputError(f"latent shape {tuple(z.shape)} != {self.spec.latent_shape}")
        self._local.state = {"capture": capture, "edit": attention_edit}
        try:
            out = self.unet(z[None], int(timestep), encoder_hidden_states=cond.data[None]).sample
        finally:
            self._local.state = {}
        return out[0]
