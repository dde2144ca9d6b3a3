"""Train the toy backbone on procedural shape scenes (epsilon objective)."""
from __future__ import annotations

import logging
import time

import numpy as np
import torch
from torch.nn import functional as F

from ..ddim import scaled_linear_alphas_cumprod
from .toy import ToyModel, ToyTokenizer, save_weights, toy_encode
from .toy_data import random_scene

log = logging.getLogger(__name__)


def build_dataset(n: int, seed: int, color_drop: float = 0.15):
    rng = np.random.default_rng(seed)
    tok = ToyTokenizer()
    latents = np.empty((n, 4, 16, 16), np.float32)
    ids = np.empty((n, tok.context_length), np.int64)
    for i in range(n):
        scene = random_scene(rng, color_drop=color_drop)
        latents[i] = toy_encode(torch.from_numpy(scene.image)[None])[0].numpy()
        ids[i] = tok.encode(scene.prompt)
    return torch.from_numpy(latents), torch.from_numpy(ids)


def train_toy(steps: int = 12000, batch_size: int = 64, lr: float = 2e-3, seed: int = 0,
              dataset_size: int = 20000, uncond_prob: float = 0.1, out=None,
              config: dict | None = None, ema_decay: float = 0.999) -> ToyModel:
    torch.manual_seed(seed)
    latents, ids = build_dataset(dataset_size, seed)
    null_ids = torch.tensor(ToyTokenizer().encode(""))
    model = ToyModel(config)
    ema = None
    if ema_decay > 0:
        ema = torch.optim.swa_utils.AveragedModel(
            model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(ema_decay))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.05)
    alphas = torch.from_numpy(scaled_linear_alphas_cumprod()).float()
    gen = torch.Generator().manual_seed(seed)
    start = time.time()
    for step in range(steps):
        idx = torch.randint(0, dataset_size, (batch_size,), generator=gen)
        z0, tok = latents[idx], ids[idx].clone()
        drop = torch.rand(batch_size, generator=gen) < uncond_prob
        tok[drop] = null_ids
        t = torch.randint(0, len(alphas), (batch_size,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        a = alphas[t][:, None, None, None]
        zt = a.sqrt() * z0 + (1 - a).sqrt() * noise
        pred = model.unet(zt, t, model.text(tok))
        loss = F.mse_loss(pred, noise)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if ema is not None:
            ema.update_parameters(model)
        if step % 200 == 0 or step == steps - 1:
            log.info("step %d loss %.4f (%.0fs)", step, loss.item(), time.time() - start)
    if ema is not None:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    if out is not None:
        save_weights(model, out, meta={"steps": steps, "seed": seed, "batch_size": batch_size,
                                       "lr": lr, "dataset_size": dataset_size,
                                       "ema_decay": ema_decay})
    return model
