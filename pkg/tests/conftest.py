import numpy as np
import pytest

from streamasd.config import EncoderConfig, FrontendConfig, FusionConfig, ModelConfig
from streamasd.model_io import init_random


def tiny_config(**fusion) -> ModelConfig:
    """Same topology as the default model at toy widths (16x16 faces)."""
    return ModelConfig(
        encoder=EncoderConfig(channels=(4, 8, 8), embed_dim=16),
        fusion=FusionConfig(**{"d_model": 32, "heads": 4, "d_ff": 64, "gru_hidden": 8, **fusion}),
        frontend=FrontendConfig(image_size=16),
    ).validate()


@pytest.fixture(scope="session")
def default_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def default_params(default_config):
    return init_random(default_config, 0)


@pytest.fixture(scope="session")
def tiny():
    cfg = tiny_config()
    return cfg, init_random(cfg, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one ``[PASS]/[FAIL] criterion N`` line; all lines are echoed at the end of the run."""

    def emit(number: int, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
