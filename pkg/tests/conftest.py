import pytest

from langneck.data import build_vocabulary, generate_dataset
from langneck.model import ModelConfig, init_params

TINY_IMAGE = 16


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(
        vocab_size=59,
        d_model=8,
        n_heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        mlp_ratio=2,
        patch_size=4,
        image_size=TINY_IMAGE,
        n_prompt=4,
        n_classes=16,
        max_positions=16,
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def vocab():
    return build_vocabulary()


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_train_set():
    return generate_dataset(seed=0, count=32, split="train", image_size=TINY_IMAGE, workers=1)


@pytest.fixture(scope="session")
def tiny_val_set():
    return generate_dataset(seed=0, count=16, split="val", image_size=TINY_IMAGE, workers=1)
