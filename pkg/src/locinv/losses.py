"""Attention-alignment losses and their gradual thresholds.

All losses take the unnormalized per-token maps ``[num_tokens, r, r]`` and are
written in torch so token embeddings can be optimized through them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InputError


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of two flattened maps; zero when either map is all zeros."""
    a, b = a.reshape(-1), b.reshape(-1)
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return a.new_zeros(())
    return (a @ b) / (na * nb)


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(mask), dtype=like.dtype, device=like.device)


def similarity_loss(maps: torch.Tensor, masks: Mapping[int, np.ndarray],
                    positions: Sequence[int]) -> torch.Tensor:
    """Sum over nouns of one minus the cosine between attention and prior."""
    total = maps.new_zeros(())
    for p in positions:
        total = total + (1 - cosine(maps[p], _mask_tensor(masks[p], maps)))
    return total


def overlapping_loss(maps: torch.Tensor, masks: Mapping[int, np.ndarray],
                     positions: Sequence[int]) -> torch.Tensor:
    """One minus the share of the nouns' attention mass that lies inside their priors."""
    inside = maps.new_zeros(())
    mass = maps.new_zeros(())
    for p in positions:
        inside = inside + (maps[p] * _mask_tensor(masks[p], maps)).sum()
        mass = mass + maps[p].sum()
    if mass <= 0:
        raise InputError("noun attention is zero everywhere; overlap is undefined")
    return 1 - inside / mass


def adjective_binding_loss(maps: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Sum over (adjective, noun) pairs of one minus the cosine of their maps."""
    total = maps.new_zeros(())
    for adj, noun in pairs:
        total = total + (1 - cosine(maps[noun], maps[adj]))
    return total


def threshold(t: float, alpha: float, beta: float) -> float:
    if t < 0:
        raise InputError("threshold step must be >= 0")
    return beta * math.exp(-t / alpha)


@dataclass(frozen=True)
class LossWeights:
    lam: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.lam < 0 or self.alpha <= 0 or not 0 < self.beta <= 1:
            raise InputError(f"invalid loss hyperparameters {self}")


@dataclass(frozen=True)
class LossConfig:
    sim: LossWeights = LossWeights(1.0, 50.0, 0.7)
    ovl: LossWeights = LossWeights(1.0, 10.0, 0.7)
    adj: LossWeights = LossWeights(2.0, 50.0, 0.1)
    max_inner_iters: int = 15
    step_size: float = 0.01

    def __post_init__(self):
        if self.max_inner_iters < 0 or self.step_size <= 0:
            raise InputError("max_inner_iters must be >= 0 and step_size > 0")

    @classmethod
    def segmentation(cls, **kw) -> "LossConfig":
        return cls(**kw)

    @classmethod
    def detection(cls, **kw) -> "LossConfig":
        base = dict(sim=LossWeights(0.1, 25.0, 0.5), ovl=LossWeights(1.0, 25.0, 0.3))
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_prior(cls, kind: str, **kw) -> "LossConfig":
        return cls.detection(**kw) if kind == "detection" else cls.segmentation(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown loss config keys {sorted(unknown)}; valid: {sorted(known)}")
        kw = {}
        for k, v in d.items():
            kw[k] = LossWeights(**v) if k in ("sim", "ovl", "adj") else v
        return cls(**kw)

    def replace_flat(self, key: str, value) -> "LossConfig":
        """Set ``sim.lam``-style dotted keys or top-level fields."""
        d = self.to_dict()
        head, _, tail = key.partition(".")
        if head not in d or (tail and (not isinstance(d[head], dict) or tail not in d[head])):
            raise InputError(f"unknown loss config key {key!r}; valid: {flat_loss_keys()}")
        if tail:
            d[head][tail] = value
        else:
            d[head] = value
        return LossConfig.from_dict(d)


def flat_loss_keys() -> list[str]:
    keys = []
    for name in ("sim", "ovl", "adj"):
        keys += [f"{name}.{f}" for f in ("lam", "alpha", "beta")]
    return keys + ["max_inner_iters", "step_size"]
