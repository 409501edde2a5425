import numpy as np
import pytest
import torch

from mcds.cmcn import CMCNConfig
from mcds.encoder import EncoderConfig
from mcds.env import EnvSpec, generate_demonstrations
from mcds.mhfp import MHFPConfig
from mcds.trainer import ModelConfig


def tiny_model_config(tc: int = 8, d: int = 16) -> ModelConfig:
    return ModelConfig(
        EncoderConfig(mlp_hidden=16, d_model=d, depth=2, heads=2, t_context=tc),
        CMCNConfig(mlp_hidden=16, d_model=d, depth=2, heads=2, decoder_hidden=16),
        MHFPConfig(mlp_hidden=16, d_model=d, depth=2, heads=2, decoder_hidden=16),
    )


@pytest.fixture(scope="session")
def small_dataset():
    return generate_demonstrations(EnvSpec(), 12, seed=3)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def random_unit(rng, T, D):
    z = rng.standard_normal((T, D))
    return z / np.linalg.norm(z, axis=1, keepdims=True)
