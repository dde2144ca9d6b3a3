"""Per-timestep optimization of dynamic prompt tokens against localization priors."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Optional

import torch

from .adapters.base import AttentionSink
from .attention import AttentionSnapshot, aggregate
from .ddim import NoiseSchedule, model_noise
from .errors import NumericalError
from .losses import (LossConfig, adjective_binding_loss, overlapping_loss, similarity_loss,
                     threshold)
from .priors import LocalizationPrior, PromptAnnotation


@dataclass
class DynamicTokenSet:
    vectors: dict[int, torch.Tensor]  # context position -> input embedding

    @classmethod
    def initial(cls, adapter, ann: PromptAnnotation, with_adjectives: bool) -> "DynamicTokenSet":
        positions = list(ann.noun_positions)
        if with_adjectives:
            positions += [p for p in ann.adjective_positions() if p not in positions]
        emb = adapter.token_embeddings(ann.token_ids).detach()
        return cls({p: emb[p].clone() for p in sorted(positions)})

    def positions(self) -> list[int]:
        return sorted(self.vectors)

    def clone(self) -> "DynamicTokenSet":
        return DynamicTokenSet({p: v.detach().clone() for p, v in self.vectors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.positions():
            h.update(str(p).encode())
            h.update(self.vectors[p].detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.vectors[p] for p in self.positions()])


@dataclass
class LossReport:
    t: int
    L_sim: float
    L_ovl: float
    L_adj: float
    L_total: float
    TH_sim: float
    TH_ovl: float
    TH_adj: float
    iterations_used: int
    converged: bool
    active: tuple[str, ...] = ()
    initial: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class TraceWriter:
    """Appends one JSON line per inner iteration."""

    def __init__(self, stream: IO[str]):
        self.stream = stream

    def __call__(self, record: dict):
        self.stream.write(json.dumps(record) + "\n")


def active_losses(cfg: LossConfig, ann: PromptAnnotation, adjective_binding: bool) -> tuple[str, ...]:
    out = []
    if cfg.sim.lam > 0:
        out.append("sim")
    if cfg.ovl.lam > 0:
        out.append("ovl")
    if adjective_binding and cfg.adj.lam > 0 and ann.adjective_pairs:
        out.append("adj")
    return tuple(out)


def evaluate_losses(snap: AttentionSnapshot, prior: LocalizationPrior, ann: PromptAnnotation,
                    cfg: LossConfig) -> dict[str, torch.Tensor]:
    maps = snap.maps
    vals = {
        "sim": similarity_loss(maps, prior.masks, ann.noun_positions),
        "ovl": overlapping_loss(maps, prior.masks, ann.noun_positions),
        "adj": adjective_binding_loss(maps, ann.adjective_pairs),
    }
    return vals


def thresholds(t: int, cfg: LossConfig) -> dict[str, float]:
    return {k: threshold(t, w.alpha, w.beta) for k, w in (("sim", cfg.sim), ("ovl", cfg.ovl),
                                                            ("adj", cfg.adj))}


def attention_at(adapter, z, t, cond, sched: NoiseSchedule, resolution: int) -> AttentionSnapshot:
    sink = AttentionSink()
    model_noise(adapter, z, t, cond, sched, capture=sink)
    return aggregate(sink, resolution, t)


def optimize_tokens(z_t: torch.Tensor, t: int, tokens: DynamicTokenSet,
                    prior: LocalizationPrior, ann: PromptAnnotation, cfg: LossConfig,
                    adapter, sched: NoiseSchedule, adjective_binding: bool = False,
                    trace=None) -> tuple[DynamicTokenSet, LossReport, AttentionSnapshot]:
    """Update the dynamic tokens at step ``t`` until every active loss is under its threshold.

    The loop guard is always evaluated on a fresh forward pass, so the returned
    report (and the attention snapshot) describe the returned tokens. At most
    ``cfg.max_inner_iters`` gradient steps are taken.
    """
    active = active_losses(cfg, ann, adjective_binding)
    ths = thresholds(t, cfg)
    weights = {"sim": cfg.sim.lam, "ovl": cfg.ovl.lam, "adj": cfg.adj.lam}
    resolution = prior.resolution
    params = {p: v.detach().clone().requires_grad_(True) for p, v in tokens.vectors.items()}
    opt = torch.optim.Adam(list(params.values()), lr=cfg.step_size) if params else None
    z = z_t.detach()
    initial = None
    steps = 0
    while True:
        with torch.enable_grad():
            cond = adapter.encode_text(ann.token_ids, params)
            snap = attention_at(adapter, z, t, cond, sched, resolution)
            vals = evaluate_losses(snap, prior, ann, cfg)
            total = sum((weights[k] * vals[k] for k in active), snap.maps.new_zeros(()))
        floats = {k: float(v.detach()) for k, v in vals.items()}
        for k in active:
            if not math.isfinite(floats[k]):
                raise NumericalError("non-finite loss", stage="optimize-tokens", t=t,
                                     iteration=steps, loss=k)
        if initial is None:
            initial = dict(floats)
        converged = all(floats[k] < ths[k] for k in active)
        if trace is not None:
            trace({"t": t, "iter": steps, **{f"L_{k}": v for k, v in floats.items()},
                   "L_total": float(total.detach()), **{f"TH_{k}": v for k, v in ths.items()},
                   "converged": converged})
        if converged or steps >= cfg.max_inner_iters or not active:
            break
        opt.zero_grad()
        total.backward()
        for p, v in params.items():
            if v.grad is not None and not torch.isfinite(v.grad).all():
                raise NumericalError("non-finite gradient", stage="optimize-tokens", t=t,
                                     iteration=steps, loss="total")
        opt.step()
        steps += 1
    report = LossReport(t, floats["sim"], floats["ovl"], floats["adj"], float(total.detach()),
                        ths["sim"], ths["ovl"], ths["adj"], steps, converged, active, initial)
    if steps == 0:
        return tokens, report, snap.detach()
    out = DynamicTokenSet({p: v.detach().clone() for p, v in params.items()})
    return out, report, snap.detach()
