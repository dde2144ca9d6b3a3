"""Batch runs over a manifest: invert, edit and evaluate every entry.

Run directory layout::

    runs/<name>/config.json
    runs/<name>/entries/<id>/{input.png, entry.json, inversion/, attn/, edits/<task>/}
    runs/<name>/report.json
    runs/<name>/curves.csv
"""
from __future__ import annotations

import json
import logging
import time
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attention import load_snapshots
from .config import RunConfig, resolve_adapter
from .dataset import DatasetManifest, ManifestEntry, load_image, save_image
from .errors import InputError, LocInvError
from .evaluation import (MethodComparison, aggregate_reports, compare_methods, image_metrics,
                         MetricReport)
from .optimizer import TraceWriter
from .p2p import EditResult, edit as p2p_edit
from .pipeline import invert, load_result, reconstruct, save_attention, save_result
from .priors import EditSpec, annotate, load_prior

log = logging.getLogger(__name__)

STAGES = ("invert", "edit", "eval")
REPORT_FORMAT = "locinv-report/1"


@dataclass
class EntryOutcome:
    entry_id: str
    status: dict
    error: Optional[str] = None
    failed_stage: Optional[str] = None


def entry_dir(run_dir, entry_id: str) -> Path:
    return Path(run_dir) / "entries" / entry_id


def entry_annotation(entry: ManifestEntry, tokenizer, manual: Optional[dict] = None):
    """Manifest entries list their nouns explicitly; ``manual="auto"`` uses the tagger."""
    if manual == "auto":
        return annotate(entry.prompt, tokenizer)
    return annotate(entry.prompt, tokenizer, manual=manual or entry.annotation_hint())


def _result_matches(inv_dir: Path, cfg_dict: dict, checksum: str) -> bool:
    try:
        m = json.loads((inv_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return (m.get("config", {}).get("pipeline") == cfg_dict
            and m.get("adapter_checksum") == checksum
            and (inv_dir.parent / "attn").is_dir())


def invert_entry(entry: ManifestEntry, cfg: RunConfig, adapter, out: Path,
                 manual: Optional[dict] = None, force: bool = False) -> str:
    """Invert one entry into ``out``; returns "cached" when a matching result exists."""
    tok = adapter.tokenizer
    ann = entry_annotation(entry, tok, manual)
    prior = load_prior(entry.prior_sources(), adapter.spec.attention_resolution, ann)
    pcfg = cfg.pipeline_config(prior.source_kind)
    if (entry.edit_task or {}).get("kind") == "attribute_edit" and not pcfg.adjective_binding:
        # the planned edit needs adjective tokens
        pcfg = replace(pcfg, adjective_binding=True)
    inv_dir = out / "inversion"
    if not force and _result_matches(inv_dir, pcfg.to_dict(), adapter.checksum()):
        return "cached"
    out.mkdir(parents=True, exist_ok=True)
    image = load_image(entry.image_path)
    save_image(image, out / "input.png")
    (out / "entry.json").write_text(json.dumps({
        "id": entry.id, "prompt": entry.prompt, "image_path": str(entry.image_path),
        "edit_task": entry.edit_task, "prior_kind": prior.source_kind}, indent=1))
    torch.manual_seed(cfg.seed)
    inv_dir.mkdir(exist_ok=True)
    with open(inv_dir / "trace.jsonl", "w") as trace:
        result = invert(torch.from_numpy(image), ann, prior, pcfg, adapter, TraceWriter(trace))
    save_attention(result, out / "attn")
    save_result(result, inv_dir)
    return "done"


def task_name(task: dict) -> str:
    return f"{task.get('kind', 'word_swap')}-{task['source_word']}-{task['target_word']}"


def background_change_ratio(edited: np.ndarray, source: np.ndarray, inside: np.ndarray) -> float:
    """Mean absolute pixel change outside ``inside`` over the mean change inside."""
    change = np.abs(np.asarray(edited, np.float64) - np.asarray(source, np.float64)).mean(axis=0)
    inner = change[inside].mean() if inside.any() else 0.0
    outer = change[~inside].mean() if (~inside).any() else 0.0
    if inner == 0:
        return 0.0 if outer == 0 else float("inf")
    return float(outer / inner)


def _pixel_mask(grid: np.ndarray, size: int) -> np.ndarray:
    r = grid.shape[0]
    return np.kron(grid.astype(np.uint8), np.ones((size // r, size // r), np.uint8)).astype(bool)


def edit_entry(out: Path, task: dict, cfg: RunConfig, adapter) -> dict:
    """Run one edit task against the stored inversion of an entry."""
    result = load_result(out / "inversion")
    if result.adapter_checksum != adapter.checksum():
        raise InputError(f"{out}: inversion was produced by a different model checkpoint")
    ann = result.annotation
    spec_task = {"kind": "word_swap", "blend": True, **task}
    if spec_task.get("target_prompt"):
        spec = EditSpec(spec_task["kind"], spec_task["source_word"], spec_task["target_word"],
                        spec_task["target_prompt"], bool(spec_task["blend"]),
                        spec_task.get("occurrence"))
    else:
        spec = EditSpec.make(ann.prompt_text, spec_task["source_word"], spec_task["target_word"],
                             spec_task["kind"], bool(spec_task["blend"]), spec_task.get("occurrence"))
    res: EditResult = p2p_edit(result, spec, cfg.p2p, adapter)
    edited = res.edited.numpy()
    source = res.source.numpy()
    size = edited.shape[-1]
    word_index = spec.validate(ann.prompt_text)
    pos = adapter.tokenizer.word_pieces(ann.prompt_text)[word_index][1][0]
    if pos not in ann.noun_positions:
        pos = next(n for a, n in ann.adjective_pairs if a == pos)
    inside = _pixel_mask(result.prior.masks[pos], size)
    reference = load_image(out / "input.png")
    report = image_metrics(edited, reference, background_mask=~inside)
    d = out / "edits" / task_name(spec_task)
    d.mkdir(parents=True, exist_ok=True)
    save_image(edited, d / "edited.png")
    save_image(source, d / "source.png")
    meta = {
        "task": {**spec_task, "target_prompt": spec.target_prompt},
        "alignment": {str(k): v for k, v in res.alignment.items()},
        "background_change_ratio": background_change_ratio(edited, source, inside),
        "metrics": report.to_dict(),
        "injection": {"cross_steps": sum(s["cross_injected"] for s in res.stats),
                      "self_steps": sum(s["self_injected"] for s in res.stats)},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return meta


def eval_entry(out: Path, cfg: RunConfig, adapter) -> dict:
    result = load_result(out / "inversion")
    snaps = load_snapshots(out / "attn")
    targets = {p: result.prior.masks[p] for p in result.annotation.noun_positions}
    cmp = compare_methods({"run": {"entry": snaps}}, {"entry": targets}, cfg.eval.policy,
                          cfg.eval.k, cfg.eval.t)
    recon = reconstruct(result, adapter).numpy()
    save_image(recon, out / "reconstruction.png")
    metrics = image_metrics(recon, load_image(out / "input.png"))
    edits = []
    for meta_path in sorted((out / "edits").glob("*/meta.json")):
        edits.append(json.loads(meta_path.read_text()))
    summary = cmp.summary["run"]
    return {"iou": {"auc": summary["auc"], "peak_iou": summary["peak_iou"]},
            "reconstruction": metrics.to_dict(), "edits": edits}


def _process(entry: ManifestEntry, stages, cfg: RunConfig, adapter, run_dir: Path) -> EntryOutcome:
    out = entry_dir(run_dir, entry.id)
    status = {s: "skipped" for s in STAGES}
    outcome = EntryOutcome(entry.id, status)
    stage = None
    try:
        if "invert" in stages:
            stage = "invert"
            status["invert"] = invert_entry(entry, cfg, adapter, out)
        if "edit" in stages:
            stage = "edit"
            if entry.edit_task:
                edit_entry(out, entry.edit_task, cfg, adapter)
                status["edit"] = "done"
        if "eval" in stages:
            stage = "eval"
            (out / "eval.json").write_text(json.dumps(eval_entry(out, cfg, adapter), indent=1))
            status["eval"] = "done"
    except LocInvError as exc:
        log.error("entry %s failed at %s: %s", entry.id, stage, exc)
        status[stage] = "failed"
        outcome.error, outcome.failed_stage = str(exc), stage
    except Exception as exc:  # keep the batch alive; the report records the failure
        log.exception("entry %s crashed at %s", entry.id, stage)
        status[stage] = "failed"
        outcome.error, outcome.failed_stage = f"{type(exc).__name__}: {exc}", stage
    return outcome


def run_batch(manifest: DatasetManifest, cfg: RunConfig, stages: Sequence[str] = STAGES,
              run_dir=None, adapter=None) -> Path:
    """Run the requested stages for every entry; failures are isolated per entry."""
    bad = set(stages) - set(STAGES)
    if bad:
        raise InputError(f"unknown stages {sorted(bad)}; valid: {list(STAGES)}")
    run_dir = Path(run_dir or Path(cfg.output) / (cfg.name or manifest.name))
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    adapter = adapter or resolve_adapter(cfg.adapter)
    start = time.time()
    entries = sorted(manifest.entries, key=lambda e: e.id)
    if cfg.workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(lambda e: _process(e, stages, cfg, adapter, run_dir), entries))
    else:
        outcomes = [_process(e, stages, cfg, adapter, run_dir) for e in entries]
    write_report(run_dir, cfg, outcomes, adapter, time.time() - start)
    return run_dir


def run_entry_ids(run_dir) -> list[str]:
    d = Path(run_dir) / "entries"
    return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.is_dir() else []


def write_report(run_dir: Path, cfg: RunConfig, outcomes: Sequence[EntryOutcome], adapter,
                 seconds: float = 0.0) -> dict:
    """Collect per-entry eval.json files into report.json and curves.csv."""
    entries, failures = {}, []
    known = {o.entry_id: o for o in outcomes}
    for entry_id in sorted(set(run_entry_ids(run_dir)) | set(known)):
        o = known.get(entry_id)
        info = {"status": o.status if o else {}, "error": o.error if o else None}
        if o and o.error:
            failures.append({"entry": entry_id, "stage": o.failed_stage, "error": o.error})
        ev = entry_dir(run_dir, entry_id) / "eval.json"
        if ev.exists() and not (o and o.error):
            info.update(json.loads(ev.read_text()))
        entries[entry_id] = info
    comparison = comparison_for_runs({run_dir.name: run_dir}, cfg, [e for e in entries
                                                                   if "iou" in entries[e]])
    if comparison is not None:
        comparison.to_csv(run_dir / "curves.csv")
    report = {
        "format": REPORT_FORMAT,
        "run": run_dir.name,
        "adapter": {"kind": getattr(adapter, "kind", "unknown"), "checksum": adapter.checksum()},
        "entries": entries,
        "failures": failures,
        "iou": comparison.summary[run_dir.name] if comparison is not None else None,
        "metrics": {
            "reconstruction": _aggregate([e.get("reconstruction") for e in entries.values()]),
            "edit": _aggregate([ed["metrics"] for e in entries.values()
                                for ed in e.get("edits", [])]),
            "background_change_ratio": _mean([ed["background_change_ratio"]
                                              for e in entries.values()
                                              for ed in e.get("edits", [])]),
        },
        "counts": {
            "entries": len(entries),
            "failed": len(failures),
            "cached": sum(1 for e in entries.values() if e["status"].get("invert") == "cached"),
        },
        "seconds": round(seconds, 3),
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=1))
    return report


def report_schema() -> dict:
    """JSON Schema for report.json (single-run form)."""
    return json.loads((resources.files("locinv") / "data" / "report_schema.json").read_text())


def _mean(vals):
    return float(np.mean(vals)) if vals else None


def _aggregate(dicts) -> Optional[dict]:
    reports = [MetricReport(d["full"], d["background"], d["pixels"], d.get("extra", {}))
               for d in dicts if d]
    if not reports:
        return None
    for r in reports:
        for part in (r.full, r.background):
            for k, v in (part or {}).items():
                if v == "inf":
                    part[k] = float("inf")
    return aggregate_reports(reports)


def comparison_for_runs(runs: dict, cfg: RunConfig, entry_ids: Optional[Sequence[str]] = None
                        ) -> Optional[MethodComparison]:
    """Method comparison across run directories; entry ids are matched by name."""
    dumps, targets = {}, {}
    for method, run_dir in runs.items():
        per_entry = {}
        for entry_id in run_entry_ids(run_dir):
            if entry_ids is not None and entry_id not in entry_ids:
                continue
            d = entry_dir(run_dir, entry_id)
            if not (d / "attn").is_dir() or not (d / "inversion" / "manifest.json").exists():
                continue
            snaps = load_snapshots(d / "attn")
            if not snaps:
                continue
            per_entry[entry_id] = snaps
            if entry_id not in targets:
                res = load_result(d / "inversion", verify=False)
                targets[entry_id] = {p: res.prior.masks[p] for p in res.annotation.noun_positions}
        dumps[method] = per_entry
    if not targets:
        return None
    return compare_methods(dumps, targets, cfg.eval.policy, cfg.eval.k, cfg.eval.t)


def evaluate_runs(run_dirs: Sequence, cfg: RunConfig, out_dir, adapter=None) -> dict:
    """Single run: re-evaluate every entry; several runs: the method-comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not run_dirs:
        raise InputError("eval needs at least one run directory")
    runs = {}
    for rd in run_dirs:
        rd = Path(rd)
        if not (rd / "entries").is_dir():
            raise InputError(f"{rd} is not a run directory")
        name = rd.name if rd.name not in runs else str(rd)
        runs[name] = rd
    if len(runs) == 1:
        (name, rd), = runs.items()
        adapter = adapter or resolve_adapter(cfg.adapter)
        outcomes = []
        for entry_id in run_entry_ids(rd):
            d = entry_dir(rd, entry_id)
            status = {"invert": "cached", "edit": "skipped", "eval": "done"}
            try:
                (d / "eval.json").write_text(json.dumps(eval_entry(d, cfg, adapter), indent=1))
                outcomes.append(EntryOutcome(entry_id, status))
            except LocInvError as exc:
                status["eval"] = "failed"
                outcomes.append(EntryOutcome(entry_id, status, str(exc), "eval"))
        report = write_report(rd, cfg, outcomes, adapter)
        if out.resolve() != rd.resolve():
            (out / "report.json").write_text(json.dumps(report, indent=1))
            if (rd / "curves.csv").exists():
                (out / "curves.csv").write_text((rd / "curves.csv").read_text())
        return report
    comparison = comparison_for_runs(runs, cfg)
    if comparison is None:
        raise InputError("none of the runs holds attention dumps")
    comparison.to_csv(out / "curves.csv")
    report = {"format": REPORT_FORMAT, "runs": {k: str(v) for k, v in runs.items()},
              "comparison": comparison.summary}
    (out / "report.json").write_text(json.dumps(report, indent=1))
    return report
