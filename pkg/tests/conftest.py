import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from ivvae import ModelConfig, VideoVAE

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

VIDEO_VARIANTS = ("iv-vae", "baseline-causal", "baseline-gc")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def tiny_config(variant: str, z: int = 4, **kw) -> ModelConfig:
    """Small model with the full layer plan (base 8 channels)."""
    kw.setdefault("base_channels", 8)
    return ModelConfig(variant=variant, z=z, **kw)


def tiny_model(variant: str, z: int = 4, dtype=torch.float32, seed: int = 0, **kw) -> VideoVAE:
    torch.manual_seed(seed)
    model = VideoVAE(tiny_config(variant, z, **kw)).to(dtype)
    model.eval()
    return model


def image_model_for(config: ModelConfig, dtype=torch.float64, seed: int = 0) -> VideoVAE:
    """Randomly initialized image VAE that ``config`` can be initialized from."""
    torch.manual_seed(seed)
    return VideoVAE(config.image_config()).to(dtype).eval()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:>2}: {status:<7} {detail}")
