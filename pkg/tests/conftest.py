import numpy as np
import pytest

from pillar_edge.config import GridSpec, ModelConfig


def small_grid(**kw) -> GridSpec:
    """32 x 32 cells of 0.5 m around the origin; fast enough for end-to-end tests."""
    base = dict(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, pillar_size=0.5, max_pillars=1024)
    base.update(kw)
    return GridSpec(**base)


def tiny_config(**kw) -> ModelConfig:
    """Small grid, narrow channels; same topology as the default model."""
    base = dict(
        grid=small_grid(out_channels=8),
        blocks=((2, 1, 8), (2, 1, 8), (2, 1, 8)),
        up_strides=(1, 2, 4),
        up_channels=8,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
