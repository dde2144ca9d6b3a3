import math

import numpy as np
import pytest
import torch

from locinv.adapters.base import ConditioningEmbedding
from locinv.ddim import (NoiseSchedule, SamplerConfig, cfg_noise, combine_guidance, ddim_invert,
                         ddim_sample, ddim_step_back, ddim_step_forward, ddim_transfer, predict_x0)
from locinv.errors import InputError, NumericalError


class ConstantNoise:
    """Predicts a fixed noise field; DDIM inversion is then exactly invertible."""

    def __init__(self, eps, null_eps=None):
        self.eps = eps
        self.null_eps = eps if null_eps is None else null_eps
        self.calls = []

    def predict_noise(self, z, timestep, cond, capture=None, attention_edit=None):
        self.calls.append(int(timestep))
        return self.null_eps if cond.token_ids == (0,) else self.eps


def _cond(tag):
    return ConditioningEmbedding(torch.zeros(1, 2), (tag,))


def test_schedule_matches_reference_betas():
    sched = NoiseSchedule.scaled_linear(50)
    betas = np.linspace(math.sqrt(0.00085), math.sqrt(0.012), 1000) ** 2
    cum = np.cumprod(1 - betas)
    assert sched.T == 50
    assert sched.alpha_bar[0] == 1.0
    assert sched.timestep_map[1] == 1 and sched.timestep_map[50] == 981
    for k in range(1, 51):
        assert sched.alpha_bar[k] == pytest.approx(cum[(k - 1) * 20 + 1], rel=1e-12)


def test_schedule_validation():
    with pytest.raises(InputError):
        NoiseSchedule.from_alpha_bar([1.0, 0.9, 0.95])
    with pytest.raises(InputError):
        NoiseSchedule.from_alpha_bar([0.9, 0.5])
    with pytest.raises(InputError):
        NoiseSchedule.scaled_linear(0)
    with pytest.raises(InputError):
        SamplerConfig(guidance_scale=0.5)


def test_transfer_closed_form():
    # coefficient form: z * sqrt(a_to / a_from) + eps * (sqrt(1 - a_to) - sqrt(a_to (1 - a_from) / a_from))
    for z, eps, a_from, a_to in [(1.0, 0.5, 0.9, 0.5), (-0.3, 1.7, 0.2, 0.95), (2.0, -1.0, 0.6, 0.6)]:
        expect = z * math.sqrt(a_to / a_from) + eps * (
            math.sqrt(1 - a_to) - math.sqrt(a_to * (1 - a_from) / a_from))
        got = ddim_transfer(torch.tensor(z, dtype=torch.float64), eps, a_from, a_to)
        assert float(got) == pytest.approx(expect, abs=1e-12)


def test_step_forward_back_are_inverse_for_fixed_noise():
    sched = NoiseSchedule.scaled_linear(10)
    z = torch.randn(4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    eps = torch.randn_like(z)
    for t in range(1, 11):
        back = ddim_step_back(ddim_step_forward(z, t, eps, sched), t, eps, sched)
        assert torch.allclose(back, z, atol=1e-10)


def test_predict_x0_rejects_step_zero():
    sched = NoiseSchedule.scaled_linear(10)
    with pytest.raises(InputError):
        predict_x0(torch.zeros(1), 0, torch.zeros(1), sched)


def test_cfg_collapse_is_bitwise():
    e_c = torch.randn(4, 4, 4)
    e_n = torch.randn(4, 4, 4)
    assert combine_guidance(e_c, e_n, 1.0) is e_c
    out = combine_guidance(e_c, e_n, 7.5)
    assert torch.allclose(out, e_n + 7.5 * (e_c - e_n), atol=1e-5)


def test_cfg_noise_skips_null_branch_at_w1():
    eps = torch.ones(2, 2)
    adapter = ConstantNoise(eps, null_eps=torch.zeros(2, 2))
    sched = NoiseSchedule.scaled_linear(5)
    out = cfg_noise(torch.zeros(2, 2), 3, _cond(1), _cond(0), 1.0, adapter, sched)
    assert out is eps and len(adapter.calls) == 1
    out = cfg_noise(torch.zeros(2, 2), 3, _cond(1), _cond(0), 3.0, adapter, sched)
    assert torch.equal(out, torch.full((2, 2), 3.0))
    with pytest.raises(InputError):
        cfg_noise(torch.zeros(2, 2), 3, _cond(1), _cond(0), 0.5, adapter, sched)


def test_invert_then_sample_roundtrip_with_fixed_noise():
    sched = NoiseSchedule.scaled_linear(20)
    g = torch.Generator().manual_seed(1)
    eps = torch.randn(4, 8, 8, dtype=torch.float64, generator=g)
    adapter = ConstantNoise(eps)
    z0 = torch.randn(4, 8, 8, dtype=torch.float64, generator=g)
    traj = ddim_invert(z0, _cond(1), sched, adapter)
    assert len(traj) == 21 and traj.T == 20
    out = ddim_sample(traj[20], lambda t: (_cond(1), _cond(0)), sched, adapter, 1.0)
    assert torch.allclose(out[0], z0, atol=1e-9)
    assert adapter.calls[:20] == list(sched.timestep_map[1:])


def test_nonfinite_latent_aborts():
    sched = NoiseSchedule.scaled_linear(5)
    adapter = ConstantNoise(torch.full((2,), float("nan")))
    with pytest.raises(NumericalError) as info:
        ddim_invert(torch.zeros(2), _cond(1), sched, adapter)
    assert info.value.stage == "ddim-invert" and info.value.t == 1
