import pytest
import torch

from clmt.config import LossConfig, ModelConfig, OptimizerConfig, TrainConfig
from clmt.synthgen import build_dataset
from clmt.tokenizer import train_stage1

torch.set_num_threads(2)


def make_tiny_model_config(**overrides):
    base = dict(
        latent_dim=8,
        codebook_entries=8,
        codebook_stages=2,
        stride=4,
        enc_channels=(4, 6),
        kernel_size=3,
        n_blocks=2,
        static_dim=4,
        tf_layers=1,
        tf_heads=2,
        tf_ff_mult=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(
        optimizer=OptimizerConfig(batch_size=8, max_epochs=4, early_stop_patience=5),
        model=make_tiny_model_config(),
        loss=LossConfig(),
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(6, 2, 4.0, 64.0, seed=0, ratios=(0.5, 0.25, 0.25))


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_config, tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("tok")
    result = train_stage1(tiny_config, tiny_dataset, out)
    return result
