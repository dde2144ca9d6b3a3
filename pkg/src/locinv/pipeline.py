"""End-to-end localization-aware inversion: DDIM inversion, token updates, null-text updates."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch.nn import functional as F

from .adapters.base import ConditioningEmbedding
from .attention import AttentionSnapshot, save_snapshot, snapshot_path
from .ddim import (LatentTrajectory, NoiseSchedule, SamplerConfig, cfg_noise, combine_guidance,
                   ddim_invert, ddim_sample, ddim_step_back, model_noise)
from .errors import InputError, LocInvError, NumericalError
from .losses import LossConfig
from .optimizer import DynamicTokenSet, LossReport, optimize_tokens
from .priors import LocalizationPrior, PromptAnnotation

log = logging.getLogger(__name__)

RESULT_FORMAT = "locinv-inversion/1"


@dataclass(frozen=True)
class PipelineConfig:
    sampler: SamplerConfig = SamplerConfig()
    loss: LossConfig = LossConfig()
    nti_inner_iters: int = 10
    nti_step_size: float = 0.01
    nti_tolerance: float = 1e-5
    adjective_binding: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {"sampler", "loss", "nti_inner_iters", "nti_step_size", "nti_tolerance",
                 "adjective_binding"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown pipeline keys {sorted(unknown)}; valid: {sorted(known)}")
        if "sampler" in d:
            d["sampler"] = SamplerConfig(**d["sampler"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class InversionResult:
    annotation: PromptAnnotation
    prior: LocalizationPrior
    schedule: NoiseSchedule
    z0: torch.Tensor
    ddim_trajectory: LatentTrajectory  # unguided inversion {z_t}
    trajectory: LatentTrajectory  # backward trace {z_bar_t}, index 0..T
    token_schedule: list[DynamicTokenSet]  # index t-1 holds V_t
    null_schedule: list[torch.Tensor]  # index t-1 holds null_t data [L, d]
    reports: list[LossReport]  # index t-1
    attention: list[AttentionSnapshot]  # index t-1, attention under the final V_t
    config: dict = field(default_factory=dict)
    adapter_checksum: str = ""

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def zT(self) -> torch.Tensor:
        return self.trajectory[self.T]

    def tokens_at(self, t: int) -> DynamicTokenSet:
        return self.token_schedule[t - 1]

    def null_at(self, t: int) -> ConditioningEmbedding:
        return ConditioningEmbedding(self.null_schedule[t - 1], self.config.get("null_ids", ()))

    def check_complete(self):
        T = self.T
        lengths = {"tokens": len(self.token_schedule), "nulls": len(self.null_schedule)}
        bad = {k: v for k, v in lengths.items() if v != T}
        if bad or len(self.trajectory) != T + 1:
            raise InputError(f"schedule lengths {lengths}, trajectory {len(self.trajectory)}; "
                             f"expected {T} and {T + 1}")

    @property
    def guidance_scale(self) -> float:
        return float(self.config["pipeline"]["sampler"]["guidance_scale"])


def _null_embedding(adapter) -> ConditioningEmbedding:
    return adapter.encode_text("")


def null_text_step(z_target: torch.Tensor, z_bar_t: torch.Tensor, t: int,
                   cond_t: ConditioningEmbedding, null_t: ConditioningEmbedding, adapter,
                   sched: NoiseSchedule, cfg: PipelineConfig
                   ) -> tuple[torch.Tensor, ConditioningEmbedding]:
    """Fit the null embedding so the guided step from ``z_bar_t`` lands on ``z_target``."""
    w = cfg.sampler.guidance_scale
    with torch.no_grad():
        eps_cond = model_noise(adapter, z_bar_t, t, cond_t, sched)
    if w != 1 and cfg.nti_inner_iters > 0:
        null = null_t.data.detach().clone().requires_grad_(True)
        opt = torch.optim.Adam([null], lr=cfg.nti_step_size)
        for j in range(cfg.nti_inner_iters):
            with torch.enable_grad():
                eps_null = model_noise(adapter, z_bar_t, t, null_t.with_data(null), sched)
                z_prev = ddim_step_back(z_bar_t, t, combine_guidance(eps_cond, eps_null, w), sched)
                loss = F.mse_loss(z_prev, z_target)
            if not torch.isfinite(loss):
                raise NumericalError("non-finite null-text loss", stage="null-text", t=t, iteration=j)
            if loss.item() < cfg.nti_tolerance:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        null_t = null_t.with_data(null.detach())
    with torch.no_grad():
        eps = cfg_noise(z_bar_t, t, cond_t, null_t, w, adapter, sched)
        z_prev = ddim_step_back(z_bar_t, t, eps, sched)
    if not torch.isfinite(z_prev).all():
        raise NumericalError("non-finite latent", stage="null-text", t=t)
    return z_prev, null_t


def invert(image: torch.Tensor, ann: PromptAnnotation, prior: LocalizationPrior,
           config: PipelineConfig, adapter, trace=None,
           token_optimizer=optimize_tokens) -> InversionResult:
    """Run the full inversion: unguided DDIM inversion, then for t = T..1 update
    the dynamic tokens, then fit the null embedding; both are warm-started from
    the previous step's result."""
    if not prior.covers(ann):
        raise InputError("prior masks do not match the annotated nouns one-to-one")
    if config.adjective_binding and not ann.adjective_pairs:
        log.warning("adjective binding requested but the prompt has no adjective-noun pairs")
    sched = NoiseSchedule.scaled_linear(config.sampler.T)
    T = sched.T
    z0 = adapter.encode_image(image)
    with torch.no_grad():
        cond0 = adapter.encode_text(ann.token_ids)
        null = _null_embedding(adapter).detach()
    traj = ddim_invert(z0, cond0, sched, adapter)
    tokens = DynamicTokenSet.initial(adapter, ann, config.adjective_binding)
    z_bar = traj[T]
    back = [None] * (T + 1)
    back[T] = z_bar
    token_sched, null_sched, reports, snaps = [None] * T, [None] * T, [None] * T, [None] * T
    for t in range(T, 0, -1):
        try:
            tokens, report, snap = token_optimizer(z_bar, t, tokens, prior, ann, config.loss,
                                                   adapter, sched, config.adjective_binding, trace)
            with torch.no_grad():
                cond_t = adapter.encode_text(ann.token_ids, tokens.vectors)
            z_bar, null = null_text_step(traj[t - 1], z_bar, t, cond_t, null, adapter, sched, config)
        except NumericalError:
            raise
        except LocInvError as exc:
            raise type(exc)(f"{exc} (stage=invert, t={t})") from exc
        back[t - 1] = z_bar
        token_sched[t - 1] = tokens
        null_sched[t - 1] = null.data.detach().clone()
        reports[t - 1] = report
        snaps[t - 1] = snap
        log.debug("t=%d iters=%d converged=%s", t, report.iterations_used, report.converged)
    snapshot = {"pipeline": config.to_dict(), "schedule": sched.to_dict(),
                "null_ids": list(null.token_ids), "adapter": getattr(adapter, "kind", "unknown")}
    return InversionResult(ann, prior, sched, z0, traj, LatentTrajectory(back), token_sched,
                           null_sched, reports, snaps, snapshot, adapter.checksum())


def source_conditions(result: InversionResult, adapter):
    """``t -> (C_t, null_t)`` for replaying the stored schedules."""
    cache = {}

    def conditions(t):
        if t not in cache:
            cond = adapter.encode_text(result.annotation.token_ids, result.tokens_at(t).vectors)
            cache[t] = (cond, result.null_at(t))
        return cache[t]

    return conditions


def replay(result: InversionResult, adapter) -> LatentTrajectory:
    result.check_complete()
    return ddim_sample(result.zT, source_conditions(result, adapter), result.schedule, adapter,
                       result.guidance_scale)


def reconstruct(result: InversionResult, adapter) -> torch.Tensor:
    traj = replay(result, adapter)
    return adapter.decode_latent(traj[0])


# --- persistence -----------------------------------------------------------

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_result(result: InversionResult, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T = result.T
    positions = result.token_schedule[0].positions() if T else []
    tensors = {
        "z0": result.z0.numpy(),
        "ddim_trajectory": result.ddim_trajectory.stacked().numpy(),
        "trajectory": result.trajectory.stacked().numpy(),
        "null_schedule": torch.stack(result.null_schedule).numpy(),
        "token_schedule": torch.stack([s.stacked() for s in result.token_schedule]).numpy(),
    }
    files = {}
    for name, arr in tensors.items():
        p = d / f"{name}.npy"
        np.save(p, arr)
        files[name] = {"file": p.name, "sha256": _sha(p)}
    masks = np.stack([result.prior.masks[p] for p in result.annotation.noun_positions])
    np.save(d / "prior.npy", masks)
    files["prior"] = {"file": "prior.npy", "sha256": _sha(d / "prior.npy")}
    manifest = {
        "format": RESULT_FORMAT,
        "T": T,
        "token_positions": positions,
        "annotation": result.annotation.to_dict(),
        "prior_kind": result.prior.source_kind,
        "config": result.config,
        "adapter_checksum": result.adapter_checksum,
        "reports": [r.to_dict() for r in result.reports],
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def save_attention(result: InversionResult, directory) -> Path:
    d = Path(directory)
    for snap in result.attention:
        save_snapshot(snap, snapshot_path(d, snap.t))
    return d


def load_result(directory, verify: bool = True) -> InversionResult:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise InputError(f"{d} holds no inversion result")
    m = json.loads(mpath.read_text())
    if m.get("format") != RESULT_FORMAT:
        raise InputError(f"unsupported result format {m.get('format')!r}")
    arrays = {}
    for name, info in m["files"].items():
        p = d / info["file"]
        if verify and (not p.exists() or _sha(p) != info["sha256"]):
            raise InputError(f"checksum mismatch for {p}; refusing a corrupt result")
        arrays[name] = np.load(p)
    ann = PromptAnnotation.from_dict(m["annotation"])
    prior = LocalizationPrior({p: arrays["prior"][i].astype(bool)
                               for i, p in enumerate(ann.noun_positions)}, m["prior_kind"])
    sched_d = m["config"]["schedule"]
    sched = NoiseSchedule(tuple(sched_d["alpha_bar"]), tuple(sched_d["timestep_map"]))
    positions = m["token_positions"]
    tok = torch.from_numpy(arrays["token_schedule"])
    token_sched = [DynamicTokenSet({p: tok[i, j].clone() for j, p in enumerate(positions)})
                   for i in range(tok.shape[0])]
    nulls = [torch.from_numpy(a.copy()) for a in arrays["null_schedule"]]
    traj = LatentTrajectory([torch.from_numpy(a.copy()) for a in arrays["trajectory"]])
    ddim = LatentTrajectory([torch.from_numpy(a.copy()) for a in arrays["ddim_trajectory"]])
    reports = [LossReport(**{**r, "active": tuple(r["active"])}) for r in m["reports"]]
    return InversionResult(ann, prior, sched, torch.from_numpy(arrays["z0"]), ddim, traj,
                           token_sched, nulls, reports, [], m["config"], m["adapter_checksum"])
