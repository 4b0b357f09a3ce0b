import numpy as np
import pytest

from maskcluster import _kernels
from maskcluster.config import GeneratorSpec, TrainConfig
from maskcluster.dataio import generate_dataset

BACKENDS = _kernels.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def kernels(request):
    """Each kernel backend that imports in this environment."""
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> TrainConfig:
    """8x8 images, 2x2 patches, 2x decoder: small enough for finite differences."""
    base = dict(k=4, prompt_length=2, dim=6, token_dim=3, patch_size=2, image_size=8,
                upsample_factor=2, batch_size=2, steps=5, log_every=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(GeneratorSpec(num_samples=12, image_size=32, seed=3))


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
