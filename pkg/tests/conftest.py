import pytest
import torch

from instrans.data import Sample
from instrans.networks import NetConfig, init_networks


def random_masks(n, h, w, gen, p=0.3, dtype=torch.float32):
    """Binary [n, 1, h, w] masks, each with at least one foreground pixel."""
    m = (torch.rand(n, 1, h, w, generator=gen) < p).to(dtype)
    m[:, 0, 0, 0] = 1
    return m


def distinct_area_masks(n, h, w, gen, dtype=torch.float32):
    """Masks whose foreground areas are pairwise distinct (so canonical order is unique)."""
    while True:
        m = random_masks(n, h, w, gen, p=float(torch.rand((), generator=gen)) * 0.5 + 0.1, dtype=dtype)
        areas = m.flatten(1).sum(1).tolist()
        if len(set(areas)) == n:
            return m


def random_sample(n, h, w, gen, domain="X", sid="s", dtype=torch.float32):
    image = torch.rand(3, h, w, generator=gen, dtype=dtype) * 2 - 1
    return Sample(image, distinct_area_masks(n, h, w, gen, dtype), domain, sid)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # 16x16 inputs need a 4-layer discriminator (2 stride-2 extractor layers + head)
    return NetConfig(base_channels=4, n_res_blocks=1, discriminator_layers=4, mask_capacity=4)


@pytest.fixture(scope="session")
def small_config():
    return NetConfig(base_channels=4, n_res_blocks=1, mask_capacity=4)


@pytest.fixture
def tiny_bundle64(tiny_config):
    return init_networks(tiny_config, seed=0, dtype=torch.float64)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
