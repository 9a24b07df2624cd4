import numpy as np
import pytest
import torch

from peft3d.evalsuite import Embedder, EmbedderConfig
from peft3d.generator import GeneratorConfig, RenderConfig, TriPlaneGenerator
from peft3d.scene import generate_corpus
from peft3d.training import TrainConfig

TINY_GEN = GeneratorConfig(
    latent_dim=8,
    plane_channels=4,
    plane_resolution=8,
    backbone_channels=(16, 16),
    decoder_hidden=8,
    sr_channels=8,
    image_resolution=32,
    render=RenderConfig(raw_resolution=16, n_samples=8),
)


@pytest.fixture(scope="session")
def tiny_gen_config():
    return TINY_GEN


@pytest.fixture()
def tiny_model(tiny_gen_config):
    return TriPlaneGenerator(tiny_gen_config, seed=1)


@pytest.fixture(scope="session")
def rand_embedder():
    # untrained features are still a valid perceptual basis for unit tests
    return Embedder(EmbedderConfig(seed=0))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "tiny"
    return generate_corpus(3, 8, None, seed=11, out_dir=out, n_test=2, resolution=32)


@pytest.fixture()
def fast_train_config():
    return TrainConfig(
        anchor_steps=40,
        personalize_steps=30,
        pti_latent_steps=40,
        pti_model_steps=15,
        pretrain_steps=5,
        batch_size=2,
        seed=0,
    )
