import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_images():
    """Small image batch in [-1, 1], float64 for gradient checks."""
    gen = torch.Generator().manual_seed(99)
    return (torch.rand((2, 1, 4, 4), generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
