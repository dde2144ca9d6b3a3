"""Acceptance criteria; each test records one PASS/FAIL line for the session summary."""
import functools
import json
import math
import time

import jsonschema
import numpy as np
import pytest
import torch

from conftest import entry_inputs
from locinv.batch import background_change_ratio, report_schema
from locinv.cli import main
from locinv.ddim import NoiseSchedule, SamplerConfig, cfg_noise, ddim_invert, ddim_sample, model_noise
from locinv.dataset import bundled_toy_manifest
from locinv.evaluation import THRESHOLDS, compare_methods, iou_curve, psnr_from_mse
from locinv.losses import (LossConfig, LossWeights, adjective_binding_loss, overlapping_loss, similarity_loss,
                           threshold)
from locinv.p2p import P2PConfig, edit
from locinv.pipeline import PipelineConfig, null_text_step, reconstruct
from locinv.priors import EditSpec

RESULTS = []

# Frozen on the bundled toy weights: worst per-pixel error of w = 1 DDIM
# invert-then-sample over the six bundled scenes, with headroom.
ROUNDTRIP_MAX_ERROR = 0.05
NTI_MIN_GAIN_DB = 2.0
BACKGROUND_RATIO_MAX = 0.1
REPLAY_TOL = 1e-5


def criterion(name, budget=None):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
                seconds = time.perf_counter() - start
                if budget is not None:
                    assert seconds < budget, f"took {seconds:.1f}s, budget {budget}s"
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                RESULTS.append((name, False, time.perf_counter() - start, msg))
                print(f"FAIL {name}: {msg}")
                raise
            RESULTS.append((name, True, seconds, detail))
            print(f"PASS {name}: {detail}")
        return wrapper
    return deco


def _t(x):
    return torch.as_tensor(np.asarray(x, np.float64))


# --- losses -------------------------------------------------------------------

@criterion("loss identities", budget=1)
def test_loss_identities():
    mask = np.zeros((4, 4), bool)
    mask[1:3, 0:3] = True
    other = ~mask
    a = _t(np.where(mask, 0.7, 0.0))[None]
    assert abs(float(similarity_loss(a, {0: mask}, [0]))) < 1e-6
    assert abs(float(similarity_loss(3.5 * a, {0: mask}, [0]))) < 1e-6
    assert abs(float(similarity_loss(a, {0: other}, [0])) - 1) < 1e-6
    assert abs(float(overlapping_loss(a, {0: mask}, [0]))) < 1e-6
    p = mask.mean()
    uniform = torch.full((1, 4, 4), 1 / 16, dtype=torch.float64)
    assert abs(float(overlapping_loss(uniform, {0: mask}, [0])) - (1 - p)) < 1e-6
    pair = torch.stack([a[0], a[0]])
    assert abs(float(adjective_binding_loss(pair, [(0, 1)]))) < 1e-6
    return "sim/ovl/adj identities within 1e-6"


def _fd_check(fn, x, eps=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += eps
        down[i] -= eps
        numeric.reshape(-1)[i] = (fn(up.reshape(x.shape)) - fn(down.reshape(x.shape))) / (2 * eps)
    return float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-12))


@criterion("gradient checks", budget=10)
def test_gradient_checks():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        maps = _t(rng.random((3, 4, 4)) + 0.05)
        masks = {0: rng.random((4, 4)) > 0.5, 1: rng.random((4, 4)) > 0.4}
        masks = {k: m if m.any() else np.eye(4, dtype=bool) for k, m in masks.items()}
        worst = max(worst,
                    _fd_check(lambda m: similarity_loss(m, masks, [0, 1]), maps),
                    _fd_check(lambda m: overlapping_loss(m, masks, [0, 1]), maps),
                    _fd_check(lambda m: adjective_binding_loss(m, [(2, 0), (2, 1)]), maps))
    assert worst < 1e-4, worst
    return f"worst relative error {worst:.2e}"


@criterion("threshold schedule")
def test_threshold_schedule():
    triples = [LossConfig.segmentation().sim, LossConfig.segmentation().ovl,
               LossConfig.detection().sim, LossConfig.detection().ovl, LossConfig().adj]
    for w in triples:
        values = [threshold(t, w.alpha, w.beta) for t in range(50, -1, -1)]
        ref = [w.beta * math.exp(-t / w.alpha) for t in range(50, -1, -1)]
        assert max(abs(a - b) for a, b in zip(values, ref)) <= 1e-12
        assert all(b > a for a, b in zip(values, values[1:]))
    return f"{len(triples)} parameter pairs"


# --- sampling -----------------------------------------------------------------

@criterion("DDIM roundtrip", budget=120)
def test_ddim_roundtrip(toy, toy_manifest):
    sched = NoiseSchedule.scaled_linear(50)
    errors = []
    for entry in toy_manifest:
        image, ann, _ = entry_inputs(entry, toy)
        cond = toy.encode_text(ann.token_ids)
        runs = []
        for _ in range(2):
            traj = ddim_invert(toy.encode_image(image), cond, sched, toy)
            out = ddim_sample(traj[50], lambda t: (cond, cond), sched, toy, 1.0)
            runs.append(toy.decode_latent(out[0]))
        assert torch.equal(runs[0], runs[1]), f"{entry.id} is not deterministic"
        errors.append(float((runs[0] - image).abs().max()))
    worst = max(errors)
    assert worst < ROUNDTRIP_MAX_ERROR, errors
    return f"max error {worst:.4f} < {ROUNDTRIP_MAX_ERROR}"


@criterion("CFG collapse")
def test_cfg_collapse(toy, toy_manifest):
    sched = NoiseSchedule.scaled_linear(50)
    image, ann, _ = entry_inputs(toy_manifest.get("toy-00"), toy)
    z0 = toy.encode_image(image)
    cond = toy.encode_text(ann.token_ids)
    null = toy.encode_text("")
    z = ddim_invert(z0, cond, sched, toy)[30]
    with torch.no_grad():
        assert torch.equal(cfg_noise(z, 30, cond, null, 1.0, toy, sched),
                           model_noise(toy, z, 30, cond, sched))
    cfg = PipelineConfig(sampler=SamplerConfig(guidance_scale=1.0))
    target = torch.randn(z.shape, generator=torch.Generator().manual_seed(0))
    _, learned = null_text_step(target, z, 30, cond, null, toy, sched, cfg)
    drift = float((learned.data - null.data).abs().max())
    assert drift <= 1e-7, drift
    return f"bitwise eps; null drift {drift:.1e}"


def _invert_entry(toy, entry, loss=None, **kw):
    from locinv.pipeline import invert

    image, ann, prior = entry_inputs(entry, toy)
    torch.manual_seed(0)
    cfg = PipelineConfig(loss=loss or LossConfig.for_prior(prior.source_kind), **kw)
    return image, invert(image, ann, prior, cfg, toy)


def _psnr(a, b):
    return psnr_from_mse(float(((a - b) ** 2).mean()))


@criterion("NTI benefit", budget=300)
def test_nti_benefit(toy, toy_manifest):
    off = LossConfig(sim=LossWeights(0, 50, 0.7), ovl=LossWeights(0, 10, 0.7))
    gains = []
    for entry in toy_manifest:
        image, learned = _invert_entry(toy, entry, off)
        _, fixed = _invert_entry(toy, entry, off, nti_inner_iters=0)
        gains.append(_psnr(reconstruct(learned, toy), image) - _psnr(reconstruct(fixed, toy), image))
    assert min(gains) >= NTI_MIN_GAIN_DB, gains
    return f"PSNR gain min {min(gains):.1f} dB, mean {np.mean(gains):.1f} dB"


FIXTURE_SECONDS = {}


@pytest.fixture(scope="module")
def locinv_results(toy, toy_manifest):
    start = time.perf_counter()
    out = {e.id: _invert_entry(toy, e)[1] for e in toy_manifest}
    FIXTURE_SECONDS["locinv"] = time.perf_counter() - start
    return out


@criterion("localization benefit")
def test_localization_benefit(toy, toy_manifest, locinv_results):
    start = time.perf_counter()
    dumps = {"locinv": {}, "baseline": {}}
    targets = {}
    for entry in toy_manifest:
        kind = locinv_results[entry.id].prior.source_kind
        base = LossConfig.for_prior(kind).replace_flat("sim.lam", 0.0).replace_flat("ovl.lam", 0.0)
        _, baseline = _invert_entry(toy, entry, base)
        r = locinv_results[entry.id]
        dumps["locinv"][entry.id] = {s.t: s for s in r.attention}
        dumps["baseline"][entry.id] = {s.t: s for s in baseline.attention}
        targets[entry.id] = {p: r.prior.masks[p] for p in r.annotation.noun_positions}
    summary = compare_methods(dumps, targets).summary
    ours, base = summary["locinv"]["auc"], summary["baseline"]["auc"]
    assert ours > base, (ours, base)
    seconds = time.perf_counter() - start + FIXTURE_SECONDS["locinv"]
    assert seconds < 600, f"took {seconds:.0f}s including the shared inversions"
    return f"AUC {ours:.3f} vs {base:.3f} over {len(targets)} entries in {seconds:.0f}s"


@criterion("IoU oracle equivalence")
def test_iou_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        grid = rng.random((8, 8))
        grid /= grid.max()
        mask = rng.random((8, 8)) < rng.random()
        curve = iou_curve(grid, mask)
        for k, theta in enumerate(THRESHOLDS):
            inter = union = 0
            for i in range(8):
                for j in range(8):
                    on = grid[i, j] >= theta
                    inter += bool(on and mask[i, j])
                    union += bool(on or mask[i, j])
            assert curve.iou[k] == (inter / union if union else 1.0)
        assert curve.iou[0] == mask.sum() / 64
    return "100 fixtures exact"


@criterion("edit contracts")
def test_edit_contracts(toy, toy_manifest, locinv_results):
    ratios = []
    for entry in toy_manifest:
        r = locinv_results[entry.id]
        word = r.annotation.words[r.annotation.noun_positions[0]]
        same = edit(r, EditSpec.make(r.annotation.prompt_text, word, word), P2PConfig(), toy)
        assert torch.equal(same.edited, same.source), entry.id
        gap = max(float((a - b).abs().max())
                  for a, b in zip(same.source_trajectory, r.trajectory.latents))
        assert gap <= REPLAY_TOL, (entry.id, gap)
        task = entry.edit_task
        if task.get("kind", "word_swap") != "word_swap":
            continue
        spec = EditSpec.make(r.annotation.prompt_text, task["source_word"], task["target_word"])
        res = edit(r, spec, P2PConfig(), toy)
        pos = r.annotation.noun_position(task["source_word"])
        inside = np.kron(r.prior.masks[pos], np.ones((8, 8))).astype(bool)
        edited, source = res.edited.numpy(), res.source.numpy()
        assert np.abs(edited - source)[:, inside].mean() > 0, f"{entry.id}: edit changed nothing"
        ratios.append(background_change_ratio(edited, source, inside))
    assert ratios and max(ratios) <= BACKGROUND_RATIO_MAX, ratios
    return f"self-edit bitwise, replay <= {REPLAY_TOL}, max background ratio {max(ratios):.3f}"


@criterion("CLI smoke", budget=600)
def test_cli_smoke(tmp_path):
    run = tmp_path / "run"
    manifest = str(bundled_toy_manifest())
    assert main(["invert", "--manifest", manifest, "--out", str(run)]) == 0
    assert main(["edit", "--run", str(run)]) == 0
    assert main(["eval", "--run", str(run)]) == 0
    report = json.loads((run / "report.json").read_text())
    jsonschema.validate(report, report_schema())
    assert report["counts"]["failed"] == 0 and report["counts"]["entries"] == 6
    return f"6 entries, AUC {report['iou']['auc']:.3f}"
