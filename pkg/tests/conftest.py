import numpy as np
import pytest
from hypothesis import settings

from promptcam.data import SynthSpec, generate_synth_traits
from promptcam.prompt import PromptSet, PromptVariant
from promptcam.vit import ViTConfig, ViTModel

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

TINY = ViTConfig(depth=2, dim=8, heads=2, patch_size=4, image_size=8, num_classes=3)


@pytest.fixture
def tiny_model():
    return ViTModel.init(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(num_classes=4, train_per_class=6, test_per_class=3, image_size=16, patch_size=4,
                     species_per_genus=2, shared_contrast=0.15)
    return generate_synth_traits(spec, seed=5)


def tiny_prompts(model, num_classes=3, variant="deep", seed=0, scale=0.5):
    """Prompts with non-trivial values (default init is nearly zero)."""
    v = PromptVariant.parse(variant)
    ps = PromptSet.for_variant(model, num_classes, v, seed=seed)
    r = np.random.default_rng(seed + 100)
    for p in ps.params():
        p.data = r.normal(0.0, scale, size=p.shape)
    return ps, v


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
