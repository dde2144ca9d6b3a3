"""IoU curves of LocInv attention against the priors, next to the plain null-text baseline.

    python demos/localization_vs_baseline.py [out-dir]

The baseline is the same pipeline with both localization losses switched off.
"""
import sys
from pathlib import Path

import torch

from locinv import PipelineConfig, invert
from locinv.adapters.toy import ToyAdapter
from locinv.batch import entry_annotation
from locinv.dataset import bundled_toy_manifest, load_image, load_manifest
from locinv.evaluation import compare_methods
from locinv.losses import LossConfig
from locinv.priors import load_prior

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
adapter = ToyAdapter.load()
dumps, targets = {"locinv": {}, "baseline": {}}, {}
for entry in load_manifest(bundled_toy_manifest()):
    ann = entry_annotation(entry, adapter.tokenizer)
    prior = load_prior(entry.prior_sources(), 8, ann)
    image = torch.from_numpy(load_image(entry.image_path))
    loss = LossConfig.for_prior(prior.source_kind)
    for method, cfg in (("locinv", loss),
                        ("baseline", loss.replace_flat("sim.lam", 0).replace_flat("ovl.lam", 0))):
        res = invert(image, ann, prior, PipelineConfig(loss=cfg), adapter)
        dumps[method][entry.id] = {s.t: s for s in res.attention}
    targets[entry.id] = dict(prior.masks)
    print(f"{entry.id} done")

cmp = compare_methods(dumps, targets)
cmp.to_csv(out / "localization_curves.csv")
for method, s in cmp.summary.items():
    print(f"{method:9s} AUC {s['auc']:.3f}  peak IoU {s['peak_iou']:.3f} at theta {s['peak_threshold']}")
