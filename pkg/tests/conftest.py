import numpy as np
import pytest

from hatfusion.model import HatModel, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def small_model():
    return HatModel(ModelConfig(d=16, n_latents=4, n_latent_layers=1, n_stroke_layers=1, n_heads=2,
                                vocab_size=4, dropout_p=0.0, patch_grid=4, backbone_channels=8,
                                image_side=16), rng=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
