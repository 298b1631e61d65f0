import numpy as np
import pytest
import torch

from agbrecon.data import DatasetManifest, make_sample
from agbrecon.operators import make_mask, normalize_maps


def crandn(rng, *shape, dtype=torch.complex128):
    return torch.from_numpy(rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).to(dtype)


def random_instance(rng, B, H, W, C, R=4.0, n_center=4):
    """Random image, normalized maps and mask for operator/network checks."""
    m = crandn(rng, B, H, W)
    maps = torch.from_numpy(normalize_maps(rng.standard_normal((B, C, H, W)) + 1j * rng.standard_normal((B, C, H, W))))
    mask = make_mask(W, R, n_center, seed=int(rng.integers(1 << 30)))
    return m, maps, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_manifest():
    return DatasetManifest(train=8, val=2, test=2, H=32, W=32, n_coils=4, R=4, n_center=4)


@pytest.fixture(scope="session")
def tiny_samples(tiny_manifest):
    return {
        split: [make_sample(tiny_manifest, split, i) for i in range(getattr(tiny_manifest, split))]
        for split in ("train", "val", "test")
    }


TINY_TOML = """
[data]
train = 8
val = 2
test = 2
H = 32
W = 32
n_coils = 4
n_center = 4

[generator]
n_iterations = 3
growth = 1
kernels = 8

[critic]
base_channels = 8

[agb]
batch_size = 2
seed = {seed}

[train]
mode = "{mode}"

[paths]
dataset = "ds.h5"
run_dir = "run"
"""


@pytest.fixture
def tiny_config(tmp_path):
    def write(mode="cwgan-agb", seed=0, name="c.toml"):
        path = tmp_path / name
        path.write_text(TINY_TOML.format(mode=mode, seed=seed))
        return path

    return write


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
