"""Self-refining vision-language report generator built on a small numpy autodiff core."""

from .data import SyntheticSpec, Vocabulary, generate_corpus
from .model import ModelConfig, ModelState
from .refine import AggregationStrategy, GumbelConfig
from .train import LossWeights, RefineSettings, TrainConfig, train_loop

__all__ = [
    "AggregationStrategy",
    "GumbelConfig",
    "LossWeights",
    "ModelConfig",
    "ModelState",
    "RefineSettings",
    "SyntheticSpec",
    "TrainConfig",
    "Vocabulary",
    "generate_corpus",
    "train_loop",
]

__version__ = "0.1.0"
