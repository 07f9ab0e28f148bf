import numpy as np
import pytest

from fforge.backbone import BackboneConfig, build_network
from fforge.data import SynthSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 classes x 24 images of 3x16x16; enough for 5-way episodes."""
    return generate_synthetic(SynthSpec(num_classes=12, images_per_class=24, height=16, width=16,
                                        seed=5))


def tiny_config(**kw):
    base = dict(blocks=((4, 1), (6, 1), (8, 1)), input_shape=(3, 16, 16), branch_points=(1, 2),
                num_classes=4, dtype="float64")
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture
def tiny_net():
    return build_network(tiny_config(), np.random.default_rng(0))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
