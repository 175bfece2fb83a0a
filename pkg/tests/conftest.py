import numpy as np
import pytest

from loramix.model import AdapterSpec, ToyCausalLm, ToyModelConfig
from loramix.retrieval import TrigramEmbedder


TINY_CFG = ToyModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2,
                          d_ff=16, max_seq_len=16, seed=0)

TINY_ADAPTERS = AdapterSpec(n_experts=2, top_k=1, rank=2, alpha=4.0)


@pytest.fixture(scope="session")
def tiny_model() -> ToyCausalLm:
    """One small adapted model shared by read-only tests."""
    return ToyCausalLm(TINY_CFG, adapters=TINY_ADAPTERS)


@pytest.fixture(scope="session")
def embedder() -> TrigramEmbedder:
    return TrigramEmbedder(dim=256)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
