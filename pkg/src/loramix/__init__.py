"""Mixture-of-low-rank-experts adapters on a frozen toy transformer,
plus the retrieval, curation, and evaluation pipeline around them.
"""

__version__ = "0.1.0"

from .adapter import GatingDecision, LoraExpert, MixtureFfn, Router
from .baseline import SingleLoraFfn
from .model import (AdapterSpec, SingleLoraSpec, ToyCausalLm, ToyModelConfig,
                    build_frozen_model)
from .retrieval import (CorpusIndex, RetrievalConfig, TrigramEmbedder,
                        retrieve, split_recursive)
from .training import TrainConfig, TrainExample, gradient_check, train
from .evaluation import EvalConfig, EvalReport, evaluate

__all__ = [
    "AdapterSpec",
    "CorpusIndex",
    "EvalConfig",
    "EvalReport",
    "GatingDecision",
    "LoraExpert",
    "MixtureFfn",
    "RetrievalConfig",
    "Router",
    "SingleLoraFfn",
    "SingleLoraSpec",
    "ToyCausalLm",
    "ToyModelConfig",
    "TrainConfig",
    "TrainExample",
    "TrigramEmbedder",
    "build_frozen_model",
    "evaluate",
    "gradient_check",
    "retrieve",
    "split_recursive",
    "train",
]
