import numpy as np
import pytest

from noopdc.datasets import gen_shapes
from noopdc.diffusion import DenoiserTrainConfig, make_schedule, train_denoiser


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000, 1e-4, 2e-2)


@pytest.fixture(scope="session")
def small_shapes():
    return gen_shapes(40, size=16, seed=3)


@pytest.fixture(scope="session")
def trained_small(sched, small_shapes):
    """A quickly trained shapes denoiser, frozen; good enough for directional unit tests."""
    cfg = DenoiserTrainConfig(epochs=8, batch_size=32, lr=2e-3, seed=0, base_channels=8)
    model, curve = train_denoiser(small_shapes.nchw(), small_shapes.labels, 4, sched, cfg)
    return model.freeze(), curve


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
