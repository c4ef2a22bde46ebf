import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def model_cfg():
    from frest_kit.config import ModelConfig

    return ModelConfig()


@pytest.fixture()
def model(model_cfg):
    from frest_kit.model import build_model

    return build_model(model_cfg, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def image(rng):
    return torch.from_numpy(rng.random((64, 64, 3))).float()
