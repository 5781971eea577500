import numpy as np
import pytest
import torch

from hardseg.deform_branch import DeformBranchConfig
from hardseg.model import ModelConfig
from hardseg.phantom import default_spec, generate_dataset
from hardseg.ssm_branch import SSMBranchConfig
from hardseg.training import TrainConfig
from hardseg.unet import UNetConfig

torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six default 64x64 phantoms; session-scoped, treat as read-only."""
    return generate_dataset(default_spec(), 6, seed=11)


@pytest.fixture()
def small_model_cfg():
    """32x32 model with slim branches; fast enough for per-test training."""
    return ModelConfig(
        image_size=(32, 32),
        unet=UNetConfig(depth=3, base_channels=8, num_categories=4),
        ssm=SSMBranchConfig(patch_size=(4, 4), embed_dim=16, state_dim=4,
                            num_blocks=1),
        deform=DeformBranchConfig(width=8, num_layers=2),
    )


@pytest.fixture()
def small_train_cfg():
    return TrainConfig(epochs=2, batch_size=2, lr=0.01, seed=5,
                       levels_active=(1,), threshold=0.01)


@pytest.fixture()
def small_dataset():
    """Four 32x32 phantoms matching small_model_cfg (C=4: no mirrored pair)."""
    spec = default_spec(num_categories=4, noise_sigma=0.1,
                        image_size=(32, 32))
    return generate_dataset(spec, 4, seed=3)
