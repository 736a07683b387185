import numpy as np
import pytest

from dmeta import data as D
from dmeta import model
from dmeta import rng as rngs


def small_spec(num_logits=5, channels=8):
    return model.NetworkSpec.omniglot(num_logits, channels)


def random_params(spec, seed=0, head_scale=0.1):
    """Initialized parameters with a non-zero head so predictions vary."""
    p = model.init_params(spec, rngs.stream(seed, "init"))
    r = np.random.default_rng(seed)
    for n in model.HEAD_NAMES:
        p[n] = (head_scale * r.standard_normal(p[n].shape)).astype(np.float32)
    return p


@pytest.fixture(scope="session")
def glyphs():
    """Small synthetic pretraining/evaluation splits shared across tests."""
    return D.synth_glyph_splits(30, 20, 20, seed=0)


@pytest.fixture
def spec():
    return small_spec()


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0, 1, (12, 1, 28, 28)).astype(np.float32)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
