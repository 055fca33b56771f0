import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mlakit.model import ModelSpec, Seq2SeqModel

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=2, d_ff=32,
                     vocab_size=16, max_source_len=32, max_target_len=80)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return Seq2SeqModel.initialize(small_spec, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
