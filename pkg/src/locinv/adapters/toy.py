"""A tiny latent text-to-image diffusion backbone for tests and demos.

Layout: 64x64 RGB images, 4x16x16 latents, a word-level tokenizer over a
16-word vocabulary, a one-block text encoder and a small UNet whose 8x8
bottleneck holds one cross-attention and one self-attention layer.
"""
from __future__ import annotations

import io
import json
import math
import struct
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import InputError
from .base import (AdapterSpec, AttentionEdit, AttentionLayer, AttentionSink,
                   ConditioningEmbedding, apply_overrides, state_checksum)

VOCAB = ("<bos>", "<pad>", "a", "and",
         "square", "circle", "triangle", "cross",
         "red", "green", "blue", "yellow", "white", "purple", "orange", "cyan")
CONTEXT_LENGTH = 10
WEIGHTS_MAGIC = b"LOCINV-TOY\0"
WEIGHTS_VERSION = 1
DEFAULT_WEIGHTS = "toy_v1.bin"


class ToyTokenizer:
    """Whitespace tokenizer; every vocabulary word is a single piece."""

    def __init__(self, vocab: Sequence[str] = VOCAB, context_length: int = CONTEXT_LENGTH):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.context_length = context_length
        self.bos = self.index["<bos>"]
        self.pad = self.index["<pad>"]

    def words(self, prompt: str) -> list[str]:
        return prompt.lower().split()

    def word_pieces(self, prompt: str) -> list[tuple[str, list[int]]]:
        out, pos = [], 1
        for word in self.words(prompt):
            if word not in self.index:
                raise InputError(f"word {word!r} is not in the toy vocabulary")
            out.append((word, [pos]))
            pos += 1
        if pos > self.context_length:
            raise InputError(f"prompt {prompt!r} exceeds context length {self.context_length}")
        return out

    def encode(self, prompt: str) -> list[int]:
        self.word_pieces(prompt)
        ids = [self.bos] + [self.index[w] for w in self.words(prompt)]
        return ids + [self.pad] * (self.context_length - len(ids))

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (self.bos, self.pad))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Multi-head attention whose weights can be captured and overwritten."""

    def __init__(self, dim, context_dim, heads, layer_id, kind):
        super().__init__()
        self.heads = heads
        self.d_head = dim // heads
        self.layer_id = layer_id
        self.kind = kind
        self.norm = nn.GroupNorm(8, dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, capture=None, edit=None):
        b, c, h, w = x.shape
        q_in = self.norm(x).flatten(2).transpose(1, 2)  # [b, hw, c]
        ctx = q_in if context is None else context
        q = self.to_q(q_in).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        k = self.to_k(ctx).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        v = self.to_v(ctx).view(b, -1, self.heads, self.d_head).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        if capture is not None and b == 1:
            capture.record(self.layer_id, h, attn[0], kind=self.kind)
        if edit is not None:
            attn = edit(self.layer_id, self.kind, attn)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


class ToyTextEncoder(nn.Module):
    def __init__(self, vocab_size=len(VOCAB), context_length=CONTEXT_LENGTH, dim=64, heads=4):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position_embedding = nn.Parameter(torch.zeros(context_length, dim))
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.ln_final = nn.LayerNorm(dim)

    def forward_embeds(self, embeds):  # [b, L, d]
        x = embeds + self.position_embedding[None]
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.ln2(x))
        return self.ln_final(x)

    def forward(self, ids):
        return self.forward_embeds(self.token_embedding(ids))


class ToyUNet(nn.Module):
    def __init__(self, channels=32, context_dim=64, temb=128):
        super().__init__()
        c1, c2 = channels, 2 * channels
        self.temb_dim = temb
        self.time = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(4, c1, 3, padding=1)
        self.res_in = ResBlock(c1, c1, temb)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res_mid1 = ResBlock(c2, c2, temb)
        self.cross = Attention(c2, context_dim, 2, "mid.cross", "cross")
        self.self_attn = Attention(c2, c2, 2, "mid.self", "self")
        self.res_mid2 = ResBlock(c2, c2, temb)
        self.up = nn.Conv2d(c2, c1, 3, padding=1)
        self.res_out = ResBlock(2 * c1, c1, temb)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, 4, 3, padding=1)

    def forward(self, z, t, context, capture=None, edit=None):
        emb = self.time(timestep_embedding(t, self.temb_dim))
        h0 = self.res_in(self.conv_in(z), emb)
        h = self.res_mid1(self.down(h0), emb)
        h = self.cross(h, context, capture, edit)
        h = self.self_attn(h, None, capture, edit)
        h = self.res_mid2(h, emb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.res_out(torch.cat([h, h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ToyModel(nn.Module):
    def __init__(self, config: Optional[dict] = None):
        super().__init__()
        self.config = dict(channels=32, text_dim=64, text_heads=4)
        self.config.update(config or {})
        self.text = ToyTextEncoder(dim=self.config["text_dim"], heads=self.config["text_heads"])
        self.unet = ToyUNet(self.config["channels"], self.config["text_dim"])


# --- codec -----------------------------------------------------------------

def toy_encode(images: torch.Tensor) -> torch.Tensor:
    """[b,3,64,64] in [0,1] -> [b,4,16,16]; channel 4 is the mean of the other three."""
    rgb = F.avg_pool2d(images, 4) * 2 - 1
    return torch.cat([rgb, rgb.mean(dim=1, keepdim=True)], dim=1)


def toy_decode(latents: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`toy_encode`, quantized to 8-bit levels."""
    rgb = torch.round(((latents[:, :3] + 1) / 2).clamp(0, 1) * 255) / 255
    return F.interpolate(rgb, scale_factor=4, mode="nearest")


# --- weights blob ----------------------------------------------------------

def save_weights(model: ToyModel, path, meta: Optional[dict] = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = json.dumps({"config": model.config, "meta": meta or {}}).encode()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(header)))
        f.write(header)
        f.write(buf.getvalue())


def load_weights(path) -> tuple[ToyModel, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(WEIGHTS_MAGIC):
        raise InputError(f"{path} is not a toy weights blob")
    off = len(WEIGHTS_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != WEIGHTS_VERSION:
        raise InputError(f"unsupported toy weights version {version}")
    off += 8
    header = json.loads(data[off:off + hlen])
    arrays = np.load(io.BytesIO(data[off + hlen:]))
    model = ToyModel(header["config"])
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in arrays.files})
    return model, header.get("meta", {})


def default_weights_path() -> Path:
    return Path(str(resources.files("locinv") / "data" / DEFAULT_WEIGHTS))


class ToyAdapter:
    """Model adapter around :class:`ToyModel`."""

    kind = "toy"

    def __init__(self, model: Optional[ToyModel] = None, weights=None):
        if model is None:
            model, _ = load_weights(weights or default_weights_path())
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = ToyTokenizer()
        self.spec = AdapterSpec(
            latent_shape=(4, 16, 16),
            attention_layers=(AttentionLayer("mid.cross", 8, "cross"),
                              AttentionLayer("mid.self", 8, "self")),
            d_text=model.config["text_dim"],
            context_length=self.tokenizer.context_length,
            image_size=64,
            codec_tolerance=0.0,
            attention_resolution=8,
        )
        self._checksum = None

    @classmethod
    def load(cls, path=None) -> "ToyAdapter":
        return cls(weights=path)

    def checksum(self) -> str:
        if self._checksum is None:
            self._checksum = state_checksum(self.model)
        return self._checksum

    def recompute_checksum(self) -> str:
        return state_checksum(self.model)

    def _ids(self, prompt) -> list[int]:
        return self.tokenizer.encode(prompt) if isinstance(prompt, str) else list(prompt)

    def token_embeddings(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        return self.model.text.token_embedding(ids)

    def encode_text(self, prompt, embedding_overrides: Optional[Mapping[int, torch.Tensor]] = None
                    ) -> ConditioningEmbedding:
        ids = self._ids(prompt)
        if len(ids) != self.spec.context_length:
            raise InputError(f"expected {self.spec.context_length} token ids, got {len(ids)}")
        embeds = apply_overrides(self.token_embeddings(ids), embedding_overrides,
                                 self.spec.context_length)
        out = self.model.text.forward_embeds(embeds[None])[0]
        return ConditioningEmbedding(out, tuple(ids))

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        image = torch.as_tensor(image, dtype=torch.float32)
        if tuple(image.shape) != (3, 64, 64):
            raise InputError(f"toy adapter expects a 3x64x64 image, got {tuple(image.shape)}")
        return toy_encode(image[None])[0]

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return toy_decode(z[None])[0]

    def _check_latent(self, z):
        if tuple(z.shape) != self.spec.latent_shape:
            raise InputError(f"latent shape {tuple(z.shape)} != {self.spec.latent_shape}")

    def predict_noise(self, z, timestep, cond: ConditioningEmbedding,
                      capture: Optional[AttentionSink] = None,
                      attention_edit: Optional[AttentionEdit] = None) -> torch.Tensor:
        self._check_latent(z)
        if not 0 <= int(timestep) < 1000:
            raise InputError(f"model timestep {timestep} outside [0, 1000)")
        t = torch.tensor([int(timestep)])
        return self.model.unet(z[None], t, cond.data[None], capture, attention_edit)[0]
