from __future__ import annotations

import numpy as np
import pytest

from eric.model import EricModel, ModelConfig
from eric.synthetic import four_state_world, generate_synthetic_corpus
from eric.training import collate


@pytest.fixture(scope="session")
def corpus():
    """Small four-state corpus and its vocabulary."""
    return generate_synthetic_corpus(four_state_world(seed=11), 24)


@pytest.fixture(scope="session")
def vocab(corpus):
    return corpus[1]


@pytest.fixture(scope="session")
def examples(corpus):
    return corpus[0]


def micro_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_decoder_blocks=1, n_encoder_blocks=1, d_ff=16, K=8, D=8,
                max_seq_len=64)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@pytest.fixture
def micro_model(vocab):
    return EricModel(micro_config(len(vocab)), seed=3)


@pytest.fixture
def small_batch(examples, micro_model):
    return collate(examples[:3], micro_model.config)


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
