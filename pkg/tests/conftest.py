import numpy as np
import pytest
import torch

from duopose.body import build_default_template


@pytest.fixture(scope="session")
def template():
    return build_default_template()


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(12345)
    np.random.seed(12345)
