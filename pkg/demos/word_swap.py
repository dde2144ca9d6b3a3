"""Word swap and attribute edits on a toy scene, with and without the prior-based blend.

    python demos/word_swap.py [out-dir]

Writes one strip per edit: input | source branch | edited.
"""
import sys
from pathlib import Path

import numpy as np
import torch

from locinv import PipelineConfig, invert
from locinv.adapters.toy import ToyAdapter
from locinv.batch import background_change_ratio, entry_annotation
from locinv.dataset import bundled_toy_manifest, load_image, load_manifest, save_image
from locinv.losses import LossConfig
from locinv.p2p import P2PConfig, edit
from locinv.priors import EditSpec, load_prior

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
adapter = ToyAdapter.load()
entry = load_manifest(bundled_toy_manifest()).get("toy-02")  # a red circle and a cyan triangle
ann = entry_annotation(entry, adapter.tokenizer)
prior = load_prior(entry.prior_sources(), 8, ann)
image = torch.from_numpy(load_image(entry.image_path))
# adjective tokens are needed for the attribute edit
cfg = PipelineConfig(loss=LossConfig.for_prior(prior.source_kind), adjective_binding=True)
result = invert(image, ann, prior, cfg, adapter)

edits = [("circle", "square", "word_swap"), ("triangle", "cross", "word_swap"),
         ("red", "green", "attribute_edit")]
for src, tgt, kind in edits:
    for blend in (True, False):
        spec = EditSpec.make(entry.prompt, src, tgt, kind, blend_with_prior=blend)
        res = edit(result, spec, P2PConfig(), adapter)
        pos = next(p for p, w in ann.words.items() if w == src)
        noun = pos if kind == "word_swap" else dict(ann.adjective_pairs)[pos]
        inside = np.kron(prior.masks[noun], np.ones((8, 8))).astype(bool)
        ratio = background_change_ratio(res.edited.numpy(), res.source.numpy(), inside)
        strip = np.concatenate([image.numpy(), res.source.numpy(), res.edited.numpy()], axis=2)
        name = f"{src}-{tgt}{'' if blend else '-noblend'}"
        save_image(strip, out / f"edit_{name}.png")
        print(f"{spec.target_prompt!r:45s} blend={blend!s:5s} background change ratio {ratio:.3f}")
