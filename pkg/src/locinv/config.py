"""Run configuration: one JSON file plus ``key=value`` overrides (overrides win).

Defaults::

    adapter.kind            "toy"         ("toy" or "stable-diffusion")
    adapter.checkpoint      null          toy weights file / diffusers model id or path
    adapter.device          "cpu"
    sampler.guidance_scale  7.5
    sampler.T               50
    loss                    null          null = per-prior defaults (segmentation or detection)
    loss_overrides          {}            dotted loss keys applied on top, e.g. {"sim.lam": 0}
    pipeline.nti_inner_iters 10, pipeline.nti_step_size 0.01, pipeline.nti_tolerance 1e-5
    pipeline.adjective_binding false
    p2p.cross_replace_fraction 0.8, p2p.self_replace_fraction 0.4, p2p.transfer_tokens true
    eval.policy "mean-over-final-k", eval.k 10, eval.t null
    manifest null, output "runs", name null, seed 0, workers 1
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .ddim import SamplerConfig
from .errors import InputError
from .losses import LossConfig
from .p2p import P2PConfig
from .pipeline import PipelineConfig


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "toy"
    checkpoint: Optional[str] = None
    device: str = "cpu"

    def __post_init__(self):
        if self.kind not in ("toy", "stable-diffusion"):
            raise InputError(f"unknown adapter kind {self.kind!r}; valid: ['stable-diffusion', 'toy']")


@dataclass(frozen=True)
class PipelineOptions:
    nti_inner_iters: int = 10
    nti_step_size: float = 0.01
    nti_tolerance: float = 1e-5
    adjective_binding: bool = False


@dataclass(frozen=True)
class EvalConfig:
    policy: str = "mean-over-final-k"
    k: int = 10
    t: Optional[int] = None

    def __post_init__(self):
        if self.policy not in ("mean-over-final-k", "per-t"):
            raise InputError(f"unknown timestep policy {self.policy!r}")
        if self.policy == "per-t" and self.t is None:
            raise InputError("eval.policy 'per-t' needs eval.t")


@dataclass(frozen=True)
class RunConfig:
    adapter: AdapterConfig = AdapterConfig()
    sampler: SamplerConfig = SamplerConfig()
    loss: Optional[LossConfig] = None
    loss_overrides: dict = field(default_factory=dict)
    pipeline: PipelineOptions = PipelineOptions()
    p2p: P2PConfig = P2PConfig()
    eval: EvalConfig = EvalConfig()
    manifest: Optional[str] = None
    output: str = "runs"
    name: Optional[str] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for key, value in self.loss_overrides.items():
            LossConfig().replace_flat(key, value)  # validates the key
        if self.workers < 1:
            raise InputError("workers must be >= 1")

    def loss_for(self, prior_kind: str) -> LossConfig:
        cfg = self.loss or LossConfig.for_prior(prior_kind)
        for key, value in sorted(self.loss_overrides.items()):
            cfg = cfg.replace_flat(key, value)
        return cfg

    def pipeline_config(self, prior_kind: str) -> PipelineConfig:
        return PipelineConfig(sampler=self.sampler, loss=self.loss_for(prior_kind),
                              **asdict(self.pipeline))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = None if self.loss is None else self.loss.to_dict()
        if d["p2p"]["local_blend_positions"] is not None:
            d["p2p"]["local_blend_positions"] = list(d["p2p"]["local_blend_positions"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, cls, "")
        kw = dict(d)
        for name, sub in (("adapter", AdapterConfig), ("sampler", SamplerConfig),
                          ("pipeline", PipelineOptions), ("p2p", P2PConfig), ("eval", EvalConfig)):
            if name in kw:
                if not isinstance(kw[name], dict):
                    raise InputError(f"config section {name!r} must be an object")
                _reject_unknown(kw[name], sub, name + ".")
                section = dict(kw[name])
                if name == "p2p" and section.get("local_blend_positions") is not None:
                    section["local_blend_positions"] = tuple(section["local_blend_positions"])
                kw[name] = sub(**section)
        if kw.get("loss") is not None:
            kw["loss"] = LossConfig.from_dict(kw["loss"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file {p} does not exist")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {p} is not valid JSON: {exc}") from exc

    def save(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return p

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise InputError(f"override {item!r} is not of the form key=value")
            value = _parse_value(raw)
            head, _, tail = key.strip().partition(".")
            if head == "loss_overrides" or head == "loss" and tail:
                d["loss_overrides"] = {**d["loss_overrides"], tail: value}
            elif tail:
                if not isinstance(d.get(head), dict):
                    raise InputError(f"unknown config key {key!r}; valid: {valid_keys()}")
                d[head] = {**d[head], tail: value}
            else:
                d[head] = value
        return RunConfig.from_dict(d)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _reject_unknown(d: dict, cls, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise InputError(f"unknown config keys {sorted(prefix + k for k in unknown)}; "
                         f"valid: {sorted(prefix + k for k in known)}")


def valid_keys() -> list[str]:
    keys = []
    for f in fields(RunConfig):
        sub = {"adapter": AdapterConfig, "sampler": SamplerConfig, "pipeline": PipelineOptions,
               "p2p": P2PConfig, "eval": EvalConfig}.get(f.name)
        keys += [f"{f.name}.{g.name}" for g in fields(sub)] if sub else [f.name]
    return keys


def resolve_adapter(cfg: AdapterConfig):
    if cfg.kind == "toy":
        from .adapters.toy import ToyAdapter

        return ToyAdapter.load(cfg.checkpoint)
    from .adapters.stable_diffusion import StableDiffusionAdapter

    return StableDiffusionAdapter.load(cfg.checkpoint, device=cfg.device)
