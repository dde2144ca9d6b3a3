"""Command-line driver: invert, edit, eval, ablate, toy-train.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, resolve_adapter
from .errors import InputError, LocInvError, NumericalError
from .losses import flat_loss_keys

log = logging.getLogger("locinv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "T", None) is not None:
        overrides.append(f"sampler.T={args.T}")
    if getattr(args, "guidance_scale", None) is not None:
        overrides.append(f"sampler.guidance_scale={args.guidance_scale}")
    if getattr(args, "adjective_binding", False):
        overrides.append("pipeline.adjective_binding=true")
    if getattr(args, "checkpoint", None):
        overrides.append(f"adapter.checkpoint={json.dumps(args.checkpoint)}")
    if getattr(args, "workers", None):
        overrides.append(f"workers={args.workers}")
    return cfg.with_overrides(overrides)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. sampler.T=20 or loss.sim.lam=0 (repeatable)")
    p.add_argument("--checkpoint", help="model weights (toy) or diffusers model id/path")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _sampler_flags(p):
    p.add_argument("--T", type=int, help="number of DDIM steps (default 50)")
    p.add_argument("--guidance-scale", type=float, help="classifier-free guidance scale (default 7.5)")
    p.add_argument("--seed", type=int, help="global seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locinv", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="invert one image, or every entry of a manifest")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--image", help="input image (PNG/JPEG)")
    p.add_argument("--prompt", help="source prompt")
    p.add_argument("--masks", nargs="+", metavar="NOUN=PATH",
                   help="segmentation mask per noun (use noun#k for repeated nouns)")
    p.add_argument("--boxes", help='JSON list of {"noun": ..., "box": [x0, y0, x1, y1]} (normalized)')
    p.add_argument("--annotation", help='JSON {"nouns": [...], "pairs": [[adj, noun], ...]}; '
                                        "default: rule-based tagger")
    p.add_argument("--manifest", help="dataset manifest; inverts every entry")
    p.add_argument("--adjective-binding", action="store_true",
                   help="optimize adjective tokens with the binding loss")
    p.add_argument("--workers", type=int, help="parallel entries for manifest runs")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true", help="ignore cached results")

    p = sub.add_parser("edit", help="run edit tasks against a run directory")
    _common(p)
    p.add_argument("--run", required=True, help="run directory produced by invert")
    p.add_argument("--task-file", help="JSON task or list of tasks "
                                      "{image_id, kind, source_word, target_word, target_prompt, blend}; "
                                      "default: the manifest's edit tasks")

    p = sub.add_parser("eval", help="IoU curves and image metrics for one or more runs")
    _common(p)
    p.add_argument("--run", action="append", required=True, dest="runs",
                   help="run directory (repeat to compare methods)")
    p.add_argument("--out", help="where report.json and curves.csv go (default: the run)")

    p = sub.add_parser("ablate", help="sweep loss hyperparameters over a manifest")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--manifest", help="dataset manifest (default: bundled toy split)")
    p.add_argument("--grid", required=True,
                   help='JSON object or file mapping loss keys to value lists, e.g. {"sim.lam": [0, 1]}')
    p.add_argument("--out", required=True, help="ablation directory")
    p.add_argument("--workers", type=int, help="parallel entries per cell")

    p = sub.add_parser("toy-train", help="train the toy backbone on procedural scenes")
    p.add_argument("--steps", type=int, default=12000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ema-decay", type=float, default=0.999,
                   help="keep an exponential moving average of the weights (0 = off)")
    p.add_argument("--out", required=True, help="weights file")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _parse_masks(items) -> dict:
    out = {}
    for item in items:
        noun, sep, path = item.partition("=")
        if not sep or not noun or not path:
            raise UsageError(f"--masks entry {item!r} must be NOUN=PATH")
        out.setdefault(noun.lower(), []).append(path)
    return out


def cmd_invert(args) -> int:
    from .batch import invert_entry, run_batch, write_report, EntryOutcome
    from .dataset import ManifestEntry, NounTarget, load_manifest
    from .priors import load_annotation_file, load_boxes_file

    cfg = _config(args)
    out = Path(args.out)
    if args.manifest:
        if args.image or args.prompt or args.masks or args.boxes:
            raise UsageError("--manifest cannot be combined with --image/--prompt/--masks/--boxes")
        manifest = load_manifest(args.manifest)
        cfg = cfg.replace(manifest=str(args.manifest))
        run = run_batch(manifest, cfg, ["invert"], out)
        return _summarize(run)
    if not args.image or not args.prompt:
        raise UsageError("invert needs --image and --prompt (or --manifest)")
    if bool(args.masks) == bool(args.boxes):
        raise UsageError("give exactly one of --masks / --boxes")
    if args.masks:
        sources = _parse_masks(args.masks)
        nouns = tuple(NounTarget(k.partition("#")[0], Path(p), None,
                                 int(k.partition("#")[2]) if "#" in k else None)
                      for k, paths in sources.items() for p in paths)
    else:
        nouns = tuple(NounTarget(k.partition("#")[0], None, tuple(b),
                                 int(k.partition("#")[2]) if "#" in k else None)
                      for k, boxes in load_boxes_file(args.boxes).items() for b in boxes)
    for n in nouns:
        if n.mask_path is not None and not n.mask_path.exists():
            raise InputError(f"mask {n.mask_path} does not exist")
    if not Path(args.image).exists():
        raise InputError(f"image {args.image} does not exist")
    entry = ManifestEntry("image", Path(args.image).resolve(), args.prompt, nouns)
    manual = load_annotation_file(args.annotation) if args.annotation else "auto"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    adapter = resolve_adapter(cfg.adapter)
    from .batch import entry_dir

    status = invert_entry(entry, cfg, adapter, entry_dir(out, entry.id), manual, args.force)
    write_report(out, cfg, [EntryOutcome(entry.id, {"invert": status, "edit": "skipped",
                                                    "eval": "skipped"})], adapter)
    _print_convergence(entry_dir(out, entry.id))
    return EXIT_OK


def _print_convergence(d: Path):
    m = json.loads((d / "inversion" / "manifest.json").read_text())
    for r in sorted(m["reports"], key=lambda r: -r["t"]):
        print(f"t={r['t']:3d} iters={r['iterations_used']:2d} converged={str(r['converged']):5s} "
              f"L_sim={r['L_sim']:.4f}/{r['TH_sim']:.4f} L_ovl={r['L_ovl']:.4f}/{r['TH_ovl']:.4f}")


def _summarize(run: Path) -> int:
    report = json.loads((run / "report.json").read_text())
    for entry_id, info in report["entries"].items():
        status = " ".join(f"{k}={v}" for k, v in info["status"].items())
        print(f"{entry_id}: {status}" + (f" error={info['error']}" if info["error"] else ""))
    print(f"{report['counts']['entries']} entries, {report['counts']['failed']} failed, "
          f"{report['counts']['cached']} cached -> {run}")
    return EXIT_DATA if report["failures"] else EXIT_OK


def cmd_edit(args) -> int:
    from .batch import EntryOutcome, edit_entry, entry_dir, run_entry_ids, write_report

    run = Path(args.run)
    if not (run / "entries").is_dir():
        raise InputError(f"{run} is not a run directory")
    cfg = _config(_with_run_config(args, run))
    adapter = resolve_adapter(cfg.adapter)
    if args.task_file:
        raw = json.loads(Path(args.task_file).read_text())
        tasks = raw if isinstance(raw, list) else [raw]
        ids = run_entry_ids(run)
        for task in tasks:
            if "image_id" not in task:
                if len(ids) != 1:
                    raise InputError("task needs image_id when the run has several entries")
                task["image_id"] = ids[0]
    else:
        tasks = []
        for entry_id in run_entry_ids(run):
            meta = json.loads((entry_dir(run, entry_id) / "entry.json").read_text())
            if meta.get("edit_task"):
                tasks.append({"image_id": entry_id, **meta["edit_task"]})
    outcomes = {}
    for task in tasks:
        entry_id = task["image_id"]
        d = entry_dir(run, entry_id)
        if not d.is_dir():
            raise InputError(f"run has no entry {entry_id!r}")
        body = {k: v for k, v in task.items() if k != "image_id"}
        try:
            meta = edit_entry(d, body, cfg, adapter)
            print(f"{entry_id}: {body.get('kind', 'word_swap')} {body['source_word']} -> "
                  f"{body['target_word']} background_change_ratio="
                  f"{meta['background_change_ratio']:.4f}")
            outcomes.setdefault(entry_id, EntryOutcome(entry_id, {"invert": "cached",
                                                                  "edit": "done", "eval": "skipped"}))
        except NumericalError:
            raise
        except LocInvError as exc:
            if len(tasks) == 1:
                raise
            log.error("edit for %s failed: %s", entry_id, exc)
            outcomes[entry_id] = EntryOutcome(entry_id, {"invert": "cached", "edit": "failed",
                                                         "eval": "skipped"}, str(exc), "edit")
    write_report(run, cfg, list(outcomes.values()), adapter)
    return EXIT_DATA if any(o.error for o in outcomes.values()) else EXIT_OK


def _with_run_config(args, run: Path):
    # reuse the run's config snapshot unless one was given explicitly
    if not args.config and (run / "config.json").exists():
        args.config = str(run / "config.json")
    return args


def cmd_eval(args) -> int:
    from .batch import evaluate_runs

    runs = [Path(r) for r in args.runs]
    cfg = _config(_with_run_config(args, runs[0]))
    out = Path(args.out) if args.out else runs[0]
    report = evaluate_runs(runs, cfg, out)
    if "comparison" in report:
        for method, s in report["comparison"].items():
            print(f"{method}: auc={s['auc']} peak_iou={s['peak_iou']} curves={s['curves']}")
    else:
        iou = report.get("iou") or {}
        print(f"{report['run']}: auc={iou.get('auc')} peak_iou={iou.get('peak_iou')} "
              f"entries={report['counts']['entries']} failed={report['counts']['failed']}")
    return EXIT_OK


def parse_grid(spec: str) -> dict:
    path = Path(spec)
    try:
        raw = json.loads(path.read_text() if path.exists() else spec)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--grid is neither a JSON file nor a JSON object: {exc}") from exc
    if not isinstance(raw, dict) or not raw:
        raise UsageError("--grid must be a non-empty object of loss keys to value lists")
    valid = flat_loss_keys()
    for key, values in raw.items():
        if key not in valid:
            raise InputError(f"grid key {key!r} is not a loss config field; valid: {valid}")
        if not isinstance(values, list) or not values:
            raise UsageError(f"grid values for {key!r} must be a non-empty list")
    return raw


def cmd_ablate(args) -> int:
    from .batch import run_batch
    from .dataset import bundled_toy_manifest, load_manifest

    grid = parse_grid(args.grid)
    cfg = _config(args)
    manifest = load_manifest(args.manifest or bundled_toy_manifest())
    adapter = resolve_adapter(cfg.adapter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        name = "_".join(f"{k}={v}" for k, v in cell.items())
        cell_cfg = cfg.replace(loss_overrides={**cfg.loss_overrides, **cell}, name=name)
        run = run_batch(manifest, cell_cfg, ["invert", "eval"], out / name, adapter)
        report = json.loads((run / "report.json").read_text())
        iou = report.get("iou") or {}
        rows.append({**cell, "auc": iou.get("auc"), "peak_iou": iou.get("peak_iou"),
                     "failed": report["counts"]["failed"]})
        print(f"{name}: auc={iou.get('auc')} peak_iou={iou.get('peak_iou')}")
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys + ["auc", "peak_iou", "failed"])
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_toy_train(args) -> int:
    from .adapters.toy_train import train_toy

    train_toy(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
              out=args.out, ema_decay=args.ema_decay)
    print(f"weights written to {args.out}")
    return EXIT_OK


COMMANDS = {"invert": cmd_invert, "edit": cmd_edit, "eval": cmd_eval, "ablate": cmd_ablate,
            "toy-train": cmd_toy_train}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"locinv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InputError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LocInvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
