import numpy as np
import pytest

from xedit.data import SyntheticSpec, gen_dataset
from xedit.model import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # d_model=8, two blocks, 8x8 images in 4x4 patches
    return ModelConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, n_layers=2, d_mlp=16, n_classes=3, seed=3)


@pytest.fixture
def tiny_model64(tiny_config):
    return init_model(tiny_config, dtype=np.float64)


@pytest.fixture
def tiny_images(rng):
    return rng.integers(0, 256, size=(3, 8, 8)).astype(np.uint8)


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(SyntheticSpec(n_classes=4, image_size=8, seed=5), 20)


_ACCEPTANCE: dict[int, str] = {}


class _Recorder:
    def record(self, number: int, name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name} | {detail}"
        print(_ACCEPTANCE[number])
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
