"""Shared fixtures: tiny model configs, seeded models and token data."""

import numpy as np
import pytest

from core.calibration import generate_corpus, split_corpus
from core.moe_model import ModelConfig, MoEModel
from core.training import TrainConfig, ParamMask, train

TINY = {
    "vocab_size": 256,
    "hidden_size": 8,
    "expert_inner": 4,
    "num_blocks": 2,
    "num_routing_experts": 4,
    "num_shared_experts": 1,
    "k_active": 2,
    "max_seq_len": 16,
}

# 8 blocks for the layer sweep; small enough to pretrain in well under a minute
PRETRAINED = {
    "vocab_size": 256,
    "hidden_size": 32,
    "expert_inner": 16,
    "num_blocks": 8,
    "num_routing_experts": 8,
    "num_shared_experts": 1,
    "k_active": 2,
    "max_seq_len": 64,
}


@pytest.fixture
def make_config():
    def factory(**overrides) -> ModelConfig:
        values = dict(TINY)
        values.update(overrides)
        return ModelConfig(**values)

    return factory


@pytest.fixture
def make_model(make_config):
    def factory(seed: int = 0, **overrides) -> MoEModel:
        return MoEModel(make_config(**overrides), seed=seed)

    return factory


@pytest.fixture
def token_sequences():
    rng = np.random.default_rng(1234)
    return [rng.integers(0, 256, size=12).tolist() for _ in range(6)]


@pytest.fixture(scope="session")
def toy_corpora():
    general = generate_corpus("markov", seed=11, size=600)
    train_corpus, held_out = split_corpus(general, 0.1, seed=11)
    return train_corpus, held_out


@pytest.fixture(scope="session")
def pretrained(toy_corpora):
    """8-block toy model pretrained on the markov corpus (session cached)."""
    train_corpus, held_out = toy_corpora
    model = MoEModel(ModelConfig(**PRETRAINED), seed=3)
    config = TrainConfig(
        learning_rate=3e-3,
        warmup_ratio=0.1,
        batch_size=8,
        steps=300,
        seed=5,
        seq_len=64,
        aux_loss_coef=0.01,
        eval_interval=0,
    )
    result = train(model, train_corpus, config, ParamMask.all_trainable(model))
    return result.model
