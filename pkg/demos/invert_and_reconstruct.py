"""Invert one bundled toy scene and check how well the stored schedules reproduce it.

    python demos/invert_and_reconstruct.py [entry-id] [out-dir]
"""
import sys
from pathlib import Path

import torch

from locinv import PipelineConfig, invert, reconstruct
from locinv.adapters.toy import ToyAdapter
from locinv.batch import entry_annotation
from locinv.dataset import bundled_toy_manifest, load_image, load_manifest, save_image
from locinv.evaluation import image_metrics
from locinv.losses import LossConfig
from locinv.priors import load_prior

entry_id = sys.argv[1] if len(sys.argv) > 1 else "toy-00"
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

adapter = ToyAdapter.load()
entry = load_manifest(bundled_toy_manifest()).get(entry_id)
ann = entry_annotation(entry, adapter.tokenizer)
prior = load_prior(entry.prior_sources(), adapter.spec.attention_resolution, ann)
image = torch.from_numpy(load_image(entry.image_path))
print(f"{entry.id}: {entry.prompt!r}, {prior.source_kind} prior, nouns at {ann.noun_positions}")

result = invert(image, ann, prior, PipelineConfig(loss=LossConfig.for_prior(prior.source_kind)),
                adapter)
for r in result.reports[::-10]:
    print(f"  t={r.t:2d} L_sim {r.initial['sim']:.3f} -> {r.L_sim:.3f} (TH {r.TH_sim:.3f})"
          f"  L_ovl {r.initial['ovl']:.3f} -> {r.L_ovl:.3f} (TH {r.TH_ovl:.3f})"
          f"  iters {r.iterations_used}")

recon = reconstruct(result, adapter)
save_image(recon.numpy(), out / f"{entry.id}_reconstruction.png")
print(image_metrics(recon.numpy(), image.numpy()).full)
