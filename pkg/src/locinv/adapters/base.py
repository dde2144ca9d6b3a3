"""Backbone-independent types shared by every model adapter."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import torch

from ..errors import InputError


@dataclass(frozen=True)
class ConditioningEmbedding:
    """Text-encoder output for one prompt, one row per context slot."""

    data: torch.Tensor  # [context_length, d_text]
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(self.token_ids):
            raise InputError(
                f"embedding rows {tuple(self.data.shape)} do not match {len(self.token_ids)} token ids")

    def detach(self) -> "ConditioningEmbedding":
        return ConditioningEmbedding(self.data.detach().clone(), self.token_ids)

    def with_data(self, data: torch.Tensor) -> "ConditioningEmbedding":
        return ConditioningEmbedding(data, self.token_ids)


@dataclass(frozen=True)
class AttentionLayer:
    layer_id: str
    resolution: int
    kind: str = "cross"


@dataclass(frozen=True)
class AdapterSpec:
    latent_shape: tuple[int, int, int]
    attention_layers: tuple[AttentionLayer, ...]
    d_text: int
    context_length: int
    image_size: int
    codec_tolerance: float
    attention_resolution: int

    def __post_init__(self):
        cross = [l for l in self.attention_layers if l.kind == "cross"]
        if not cross:
            raise InputError("adapter declares no cross-attention layers")
        for layer in self.attention_layers:
            if self.image_size % layer.resolution:
                raise InputError(
                    f"layer {layer.layer_id} resolution {layer.resolution} does not divide {self.image_size}")

    def resolutions(self) -> list[int]:
        return sorted({l.resolution for l in self.attention_layers if l.kind == "cross"})


@dataclass
class AttentionSink:
    """Receives post-softmax attention weights during one noise-prediction call.

    Each record is ``(layer_id, resolution, weights)`` with weights shaped
    ``[heads, r*r, num_tokens]`` for cross attention. Tensors are stored as-is
    (gradients flow through them when the caller enables autograd).
    """

    records: list[tuple[str, int, torch.Tensor]] = field(default_factory=list)
    self_records: list[tuple[str, int, torch.Tensor]] = field(default_factory=list)
    keep_self: bool = False

    def record(self, layer_id: str, resolution: int, weights: torch.Tensor, kind: str = "cross"):
        if kind == "cross":
            self.records.append((layer_id, resolution, weights))
        elif self.keep_self:
            self.self_records.append((layer_id, resolution, weights))

    def __len__(self):
        return len(self.records)


# (layer_id, kind, weights) -> weights; used by the prompt-to-prompt editor
AttentionEdit = Callable[[str, str, torch.Tensor], torch.Tensor]


class Tokenizer(Protocol):
    context_length: int

    def encode(self, prompt: str) -> list[int]:
        """Full padded id sequence of length ``context_length``."""

    def word_pieces(self, prompt: str) -> list[tuple[str, list[int]]]:
        """Words of the prompt with the context positions of their pieces."""


class ModelAdapter(Protocol):
    spec: AdapterSpec
    tokenizer: Tokenizer

    def token_embeddings(self, token_ids: Sequence[int]) -> torch.Tensor: ...

    def encode_text(self, prompt, embedding_overrides: Optional[Mapping[int, torch.Tensor]] = None
                    ) -> ConditioningEmbedding: ...

    def encode_image(self, image: torch.Tensor) -> torch.Tensor: ...

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor: ...

    def predict_noise(self, z: torch.Tensor, timestep: int, cond: ConditioningEmbedding,
                      capture: Optional[AttentionSink] = None,
                      attention_edit: Optional[AttentionEdit] = None) -> torch.Tensor: ...

    def checksum(self) -> str: ...


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def apply_overrides(embeds: torch.Tensor, overrides: Optional[Mapping[int, torch.Tensor]],
                    context_length: int) -> torch.Tensor:
    """Replace rows of ``embeds`` [L, d] at the override positions."""
    if not overrides:
        return embeds
    for pos in overrides:
        if not 0 <= int(pos) < context_length:
            raise InputError(f"override position {pos} outside context of length {context_length}")
    rows = [overrides[i].to(embeds.dtype) if i in overrides else embeds[i]
            for i in range(embeds.shape[0])]
    return torch.stack(rows)
