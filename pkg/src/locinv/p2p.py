"""Prompt-to-prompt editing (word swap, attribute edit) on top of an inversion result."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .adapters.base import AttentionSink
from .ddim import cfg_noise, ddim_step_back
from .errors import InputError
from .pipeline import InversionResult, source_conditions
from .priors import EditSpec, PromptAnnotation

REPLAY_TOLERANCE = 1e-5


@dataclass(frozen=True)
class P2PConfig:
    cross_replace_fraction: float = 0.8
    self_replace_fraction: float = 0.4
    local_blend_positions: Optional[tuple[int, ...]] = None
    transfer_tokens: bool = True

    def __post_init__(self):
        for name in ("cross_replace_fraction", "self_replace_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InputError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class EditResult:
    edited: torch.Tensor
    source: torch.Tensor
    alignment: dict[int, int]
    blend_mask: Optional[np.ndarray]
    stats: list[dict] = field(default_factory=list)
    source_trajectory: list[torch.Tensor] = field(default_factory=list)
    edited_latent: Optional[torch.Tensor] = None


def lcs_pairs(a: Sequence[int], b: Sequence[int]) -> list[tuple[int, int]]:
    n, m = len(a), len(b)
    table = np.zeros((n + 1, m + 1), np.int32)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            table[i, j] = table[i + 1, j + 1] + 1 if a[i] == b[j] else max(table[i + 1, j], table[i, j + 1])
    pairs, i, j = [], 0, 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif table[i + 1, j] >= table[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def align_prompts(src: PromptAnnotation, edit: EditSpec, tokenizer) -> dict[int, int]:
    """Map source context positions to target positions.

    Matched tokens follow the longest common subsequence of the two id
    sequences; inside each unmatched stretch the first source piece maps to the
    first target piece and any remaining pieces stay unaligned.
    """
    edit.validate(src.prompt_text)
    tgt = tokenizer.encode(edit.target_prompt)
    pairs = lcs_pairs(src.token_ids, tgt)
    mapping = dict(pairs)
    anchors = [(-1, -1)] + pairs + [(len(src.token_ids), len(tgt))]
    for (i0, j0), (i1, j1) in zip(anchors, anchors[1:]):
        if i1 - i0 > 1 and j1 - j0 > 1:
            mapping[i0 + 1] = j0 + 1
    return dict(sorted(mapping.items()))


def edited_positions(src: PromptAnnotation, alignment: dict[int, int], tokenizer,
                     target_prompt: str) -> set[int]:
    """Source positions whose token differs from (or has no match in) the target."""
    tgt = tokenizer.encode(target_prompt)
    return {i for i, tok in enumerate(src.token_ids)
            if i not in alignment or tgt[alignment[i]] != tok}


def _blend_mask(result: InversionResult, positions, latent_hw) -> np.ndarray:
    grid = result.prior.union(positions).astype(np.float32)
    r = grid.shape[0]
    h, w = latent_hw
    if h % r or w % r:
        raise InputError(f"prior resolution {r} does not divide latent size {latent_hw}")
    return np.kron(grid, np.ones((h // r, w // r), np.float32))


def _run(result: InversionResult, edit: EditSpec, p2p: P2PConfig, adapter,
         noun_positions: Sequence[int], blend_mask_override=None) -> EditResult:
    result.check_complete()
    ann = result.annotation
    tok = adapter.tokenizer
    alignment = align_prompts(ann, edit, tok)
    edited = edited_positions(ann, alignment, tok, edit.target_prompt)
    tgt_ids = tok.encode(edit.target_prompt)
    src_idx = sorted(alignment)
    tgt_idx = [alignment[i] for i in src_idx]
    sched, T, w = result.schedule, result.T, result.guidance_scale
    conditions = source_conditions(result, adapter)

    mask = None
    if blend_mask_override is not None:
        mask = np.asarray(blend_mask_override, np.float32)
    elif edit.blend_with_prior:
        positions = p2p.local_blend_positions or tuple(noun_positions)
        mask = _blend_mask(result, positions, result.zT.shape[-2:])
    mask_t = None if mask is None else torch.from_numpy(mask)[None]

    z_src = z_tgt = result.zT
    src_traj = [None] * (T + 1)
    src_traj[T] = z_src
    stats = []
    with torch.no_grad():
        for t in range(T, 0, -1):
            step = T - t
            cond_s, null_t = conditions(t)
            sink = AttentionSink(keep_self=True)
            eps_s = cfg_noise(z_src, t, cond_s, null_t, w, adapter, sched, capture=sink)
            z_src_prev = ddim_step_back(z_src, t, eps_s, sched)

            overrides = {}
            if p2p.transfer_tokens:
                vectors = result.tokens_at(t).vectors
                overrides = {alignment[p]: v for p, v in vectors.items()
                             if p in alignment and p not in edited}
            cond_t = adapter.encode_text(tgt_ids, overrides)
            inject_cross = step < p2p.cross_replace_fraction * T
            inject_self = step < p2p.self_replace_fraction * T
            cross_src = {lid: a for lid, _, a in sink.records}
            self_src = {lid: a for lid, _, a in sink.self_records}

            def attention_edit(layer_id, kind, attn):
                if kind == "cross" and inject_cross and layer_id in cross_src:
                    out = attn.clone()
                    out[..., tgt_idx] = cross_src[layer_id][None][..., src_idx]
                    return out
                if kind == "self" and inject_self and layer_id in self_src:
                    return self_src[layer_id][None].expand_as(attn)
                return attn

            eps_t = cfg_noise(z_tgt, t, cond_t, null_t, w, adapter, sched,
                              attention_edit=attention_edit)
            z_tgt_prev = ddim_step_back(z_tgt, t, eps_t, sched)
            if mask_t is not None:
                z_tgt_prev = mask_t * z_tgt_prev + (1 - mask_t) * z_src_prev
            stats.append({"t": t, "cross_injected": bool(inject_cross),
                          "self_injected": bool(inject_self),
                          "latent_gap": float((z_tgt_prev - z_src_prev).abs().mean())})
            z_src, z_tgt = z_src_prev, z_tgt_prev
            src_traj[t - 1] = z_src

    gap = max(float((a - b).abs().max()) for a, b in zip(src_traj, result.trajectory.latents))
    if gap > REPLAY_TOLERANCE:
        raise InputError(f"source branch deviates from the stored trajectory by {gap:.3g}; "
                         "the inversion result does not replay")
    return EditResult(adapter.decode_latent(z_tgt), adapter.decode_latent(z_src), alignment,
                      mask, stats, src_traj, z_tgt)


def edit(result: InversionResult, spec: EditSpec, p2p: P2PConfig, adapter,
         blend_mask=None) -> EditResult:
    """Word swap: the target branch reuses source attention at aligned positions."""
    if spec.kind == "attribute_edit":
        return attribute_edit(result, spec, p2p, adapter, blend_mask)
    ann = result.annotation
    word_index = spec.validate(ann.prompt_text)
    pieces = adapter.tokenizer.word_pieces(ann.prompt_text)
    pos = pieces[word_index][1][0]
    nouns = [pos] if pos in ann.noun_positions else list(ann.noun_positions)
    return _run(result, spec, p2p, adapter, nouns, blend_mask)


def attribute_edit(result: InversionResult, spec: EditSpec, p2p: P2PConfig, adapter,
                   blend_mask=None) -> EditResult:
    """Swap an adjective; its noun's attention is carried over by injection."""
    if spec.kind != "attribute_edit":
        raise InputError("attribute_edit needs an EditSpec of kind 'attribute_edit'")
    ann = result.annotation
    word_index = spec.validate(ann.prompt_text)
    pieces = adapter.tokenizer.word_pieces(ann.prompt_text)
    adj_pos = pieces[word_index][1][0]
    pairs = [(a, n) for a, n in ann.adjective_pairs if a == adj_pos]
    if not pairs:
        raise InputError(f"{spec.source_word!r} is not in an adjective-noun pair of the annotation")
    if adj_pos not in result.tokens_at(1).vectors:
        raise InputError(f"the inversion has no dynamic token for adjective {spec.source_word!r}; "
                         "re-run inversion with adjective binding enabled")
    return _run(result, spec, p2p, adapter, [n for _, n in pairs], blend_mask)
