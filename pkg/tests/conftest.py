import numpy as np
import pytest
import torch

from locinv.adapters.toy import ToyAdapter
from locinv.batch import entry_annotation
from locinv.dataset import bundled_toy_manifest, load_image, load_manifest
from locinv.ddim import SamplerConfig
from locinv.losses import LossConfig
from locinv.pipeline import PipelineConfig, invert
from locinv.priors import load_prior

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy():
    return ToyAdapter.load()


@pytest.fixture(scope="session")
def toy_manifest():
    return load_manifest(bundled_toy_manifest())


def entry_inputs(entry, adapter):
    ann = entry_annotation(entry, adapter.tokenizer)
    prior = load_prior(entry.prior_sources(), adapter.spec.attention_resolution, ann)
    return torch.from_numpy(load_image(entry.image_path)), ann, prior


@pytest.fixture(scope="session")
def short_result(toy, toy_manifest):
    """A 10-step inversion of "a red circle and a cyan triangle" with adjective tokens."""
    image, ann, prior = entry_inputs(toy_manifest.get("toy-02"), toy)
    cfg = PipelineConfig(sampler=SamplerConfig(T=10), loss=LossConfig.for_prior(prior.source_kind),
                         adjective_binding=True)
    return invert(image, ann, prior, cfg, toy)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, seconds, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({seconds:.1f}s)  {detail}")
