"""Deterministic DDIM inversion and sampling with classifier-free guidance.

Step indices run ``0..T``. ``alpha_bar[0] = 1`` is the clean latent; step
``t >= 1`` maps to the model timestep ``timestep_map[t]``. Moving between
step ``t-1`` and ``t`` (either direction) evaluates the model at step ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .adapters.base import AttentionEdit, AttentionSink, ConditioningEmbedding
from .errors import InputError, NumericalError

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


def scaled_linear_alphas_cumprod(num_train_steps=TRAIN_STEPS, beta_start=BETA_START,
                                 beta_end=BETA_END) -> np.ndarray:
    betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_steps, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: tuple[float, ...]
    timestep_map: tuple[int, ...]  # index 0 unused (clean latent)

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if len(a) < 2:
            raise InputError("schedule needs T >= 1")
        if abs(a[0] - 1.0) > 1e-12:
            raise InputError(f"alpha_bar[0] must be 1, got {a[0]}")
        if not np.all(np.diff(a) < 0) or a[-1] <= 0:
            raise InputError("alpha_bar must be strictly decreasing and positive")
        if len(self.timestep_map) != len(a):
            raise InputError("timestep_map must have T+1 entries")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def scaled_linear(cls, T: int = 50, num_train_steps: int = TRAIN_STEPS,
                      beta_start=BETA_START, beta_end=BETA_END) -> "NoiseSchedule":
        if T < 1 or T > num_train_steps:
            raise InputError(f"T={T} out of range")
        cum = scaled_linear_alphas_cumprod(num_train_steps, beta_start, beta_end)
        stride = num_train_steps // T
        steps = [0] + [(k - 1) * stride + 1 for k in range(1, T + 1)]
        alpha = [1.0] + [float(cum[s]) for s in steps[1:]]
        return cls(tuple(alpha), tuple(steps))

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float]) -> "NoiseSchedule":
        return cls(tuple(float(a) for a in alpha_bar), tuple(range(len(alpha_bar))))

    def check_step(self, t: int):
        if not 1 <= int(t) <= self.T:
            raise InputError(f"step {t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha_bar": list(self.alpha_bar), "timestep_map": list(self.timestep_map)}


@dataclass(frozen=True)
class SamplerConfig:
    guidance_scale: float = 7.5
    T: int = 50

    def __post_init__(self):
        if self.guidance_scale < 1:
            raise InputError(f"guidance scale must be >= 1, got {self.guidance_scale}")
        if self.T < 1:
            raise InputError("T must be >= 1")


@dataclass
class LatentTrajectory:
    latents: list[torch.Tensor] = field(default_factory=list)  # index = step

    def __len__(self):
        return len(self.latents)

    def __getitem__(self, t):
        return self.latents[t]

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.latents)


def ddim_transfer(z, eps, alpha_from: float, alpha_to: float):
    """Move a latent between noise levels along the deterministic DDIM path."""
    x0 = (z - math.sqrt(1.0 - alpha_from) * eps) / math.sqrt(alpha_from)
    return math.sqrt(alpha_to) * x0 + math.sqrt(1.0 - alpha_to) * eps


def predict_x0(z, t: int, eps, sched: NoiseSchedule):
    if int(t) == 0:
        raise InputError("x0 prediction is undefined at step 0")
    sched.check_step(t)
    a = sched.alpha_bar[t]
    return (z - math.sqrt(1.0 - a) * eps) / math.sqrt(a)


def ddim_step_back(z_t, t: int, eps, sched: NoiseSchedule):
    """z_t -> z_{t-1}."""
    x0 = predict_x0(z_t, t, eps, sched)
    a_prev = sched.alpha_bar[t - 1]
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps


def ddim_step_forward(z_prev, t: int, eps, sched: NoiseSchedule):
    """z_{t-1} -> z_t, with the model noise taken at step t."""
    sched.check_step(t)
    return ddim_transfer(z_prev, eps, sched.alpha_bar[t - 1], sched.alpha_bar[t])


def model_noise(adapter, z, t: int, cond: ConditioningEmbedding, sched: NoiseSchedule,
                capture: Optional[AttentionSink] = None,
                attention_edit: Optional[AttentionEdit] = None):
    sched.check_step(t)
    return adapter.predict_noise(z, sched.timestep_map[t], cond, capture, attention_edit)


def combine_guidance(eps_cond, eps_null, w: float):
    if w == 1:
        return eps_cond
    return w * eps_cond + (1 - w) * eps_null


def cfg_noise(z, t: int, cond: ConditioningEmbedding, null: ConditioningEmbedding, w: float,
              adapter, sched: NoiseSchedule, capture: Optional[AttentionSink] = None,
              attention_edit: Optional[AttentionEdit] = None):
    """Guided noise; attention is captured (and edited) on the conditional branch only."""
    if w < 1:
        raise InputError(f"guidance scale must be >= 1, got {w}")
    eps_cond = model_noise(adapter, z, t, cond, sched, capture, attention_edit)
    if w == 1:
        return eps_cond
    eps_null = model_noise(adapter, z, t, null, sched)
    return combine_guidance(eps_cond, eps_null, w)


def _check_finite(z, stage, t):
    if not torch.isfinite(z).all():
        raise NumericalError("non-finite latent", stage=stage, t=t)


@torch.no_grad()
def ddim_invert(z0, cond: ConditioningEmbedding, sched: NoiseSchedule, adapter) -> LatentTrajectory:
    """Unguided DDIM inversion; returns latents for steps 0..T."""
    _check_finite(z0, "ddim-invert", 0)
    traj = LatentTrajectory([z0])
    z = z0
    for t in range(1, sched.T + 1):
        eps = model_noise(adapter, z, t, cond, sched)
        z = ddim_step_forward(z, t, eps, sched)
        _check_finite(z, "ddim-invert", t)
        traj.latents.append(z)
    return traj


ConditionSchedule = Callable[[int], tuple[ConditioningEmbedding, ConditioningEmbedding]]


@torch.no_grad()
def ddim_sample(zT, conditions: ConditionSchedule, sched: NoiseSchedule, adapter, w: float,
                capture_fn: Optional[Callable[[int], Optional[AttentionSink]]] = None
                ) -> LatentTrajectory:
    """Denoise from step T to 0. ``conditions(t)`` gives ``(cond_t, null_t)``.

    The returned trajectory is indexed by step like the inversion one.
    """
    latents = [None] * (sched.T + 1)
    latents[sched.T] = zT
    z = zT
    for t in range(sched.T, 0, -1):
        cond, null = conditions(t)
        capture = capture_fn(t) if capture_fn else None
        eps = cfg_noise(z, t, cond, null, w, adapter, sched, capture)
        z = ddim_step_back(z, t, eps, sched)
        _check_finite(z, "ddim-sample", t)
        latents[t - 1] = z
    return LatentTrajectory(latents)
