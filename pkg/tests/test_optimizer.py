import math

import pytest
import torch

from conftest import entry_inputs
from locinv.ddim import NoiseSchedule
from locinv.errors import NumericalError
from locinv.losses import LossConfig, LossWeights
from locinv.optimizer import DynamicTokenSet, active_losses, optimize_tokens, thresholds

SCHED = NoiseSchedule.scaled_linear(50)


@pytest.fixture(scope="module")
def setup(toy, toy_manifest):
    image, ann, prior = entry_inputs(toy_manifest.get("toy-00"), toy)
    z0 = toy.encode_image(image)
    t = 40
    a = SCHED.alpha_bar[t]
    noise = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
    z_t = math.sqrt(a) * z0 + math.sqrt(1 - a) * noise
    return z_t, t, ann, prior


def test_overlap_loss_decreases(toy, setup):
    z_t, t, ann, prior = setup
    tokens = DynamicTokenSet.initial(toy, ann, False)
    out, report, snap = optimize_tokens(z_t, t, tokens, prior, ann, LossConfig.segmentation(),
                                        toy, SCHED)
    assert report.iterations_used > 0
    assert report.L_ovl < report.initial["ovl"]
    assert out.digest() != tokens.digest()
    assert snap.t == t and snap.maps.shape == (toy.spec.context_length, 8, 8)


def test_guard_skips_updates_when_already_below_threshold(toy, setup):
    z_t, t, ann, prior = setup
    # a huge alpha keeps the threshold near 1, which any localized map is already under
    tokens = DynamicTokenSet.initial(toy, ann, False)
    cfg = LossConfig(sim=LossWeights(0, 50, 1.0), ovl=LossWeights(1, 1e9, 1.0))
    out, report, _ = optimize_tokens(z_t, t, tokens, prior, ann, cfg, toy, SCHED)
    assert report.converged and report.iterations_used == 0
    assert out is tokens
    assert thresholds(t, cfg)["ovl"] == pytest.approx(1.0)


def test_iteration_cap_and_trace(toy, setup):
    z_t, t, ann, prior = setup
    records = []
    cfg = LossConfig(max_inner_iters=3)
    _, report, _ = optimize_tokens(z_t, t, DynamicTokenSet.initial(toy, ann, False), prior, ann,
                                   cfg, toy, SCHED, trace=records.append)
    assert report.iterations_used <= 3
    assert len(records) == report.iterations_used + 1
    assert [r["iter"] for r in records] == list(range(len(records)))
    assert records[-1]["L_ovl"] == pytest.approx(report.L_ovl)


def test_zero_weights_disable_the_optimizer(toy, setup):
    z_t, t, ann, prior = setup
    cfg = LossConfig(sim=LossWeights(0, 50, 0.7), ovl=LossWeights(0, 10, 0.7))
    assert active_losses(cfg, ann, False) == ()
    tokens = DynamicTokenSet.initial(toy, ann, False)
    out, report, _ = optimize_tokens(z_t, t, tokens, prior, ann, cfg, toy, SCHED)
    assert report.iterations_used == 0 and out is tokens


def test_adjective_tokens_only_with_binding(toy, toy_manifest):
    _, ann, _ = entry_inputs(toy_manifest.get("toy-02"), toy)
    assert DynamicTokenSet.initial(toy, ann, False).positions() == list(ann.noun_positions)
    with_adj = DynamicTokenSet.initial(toy, ann, True).positions()
    assert set(ann.adjective_positions()) <= set(with_adj)
    assert "adj" in active_losses(LossConfig(), ann, True)
    assert "adj" not in active_losses(LossConfig(), ann, False)


def test_non_finite_token_raises(toy, setup):
    z_t, t, ann, prior = setup
    tokens = DynamicTokenSet.initial(toy, ann, False)
    bad = DynamicTokenSet({p: torch.full_like(v, float("nan")) for p, v in tokens.vectors.items()})
    with pytest.raises(NumericalError) as info:
        optimize_tokens(z_t, t, bad, prior, ann, LossConfig(), toy, SCHED)
    assert info.value.stage == "optimize-tokens"
