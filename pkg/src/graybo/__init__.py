"""graybo: cost-aware gray-box Bayesian optimization over tabular
learning-curve benchmarks, with meta-learned warm starts."""

from .core import (
    Condition,
    EncodedPipeline,
    History,
    HyperparamDim,
    MetaFeatures,
    ModelInfo,
    Observation,
    Pipeline,
    SearchSpace,
    best_in_history,
    encode,
    incumbent_loss,
    query_epoch,
    sample_pipeline,
)
from .optimizer import RunTrace, TuneConfig, incumbent_curve, tune

__version__ = "0.1.0"

__all__ = [
    "Condition",
    "EncodedPipeline",
    "History",
    "HyperparamDim",
    "MetaFeatures",
    "ModelInfo",
    "Observation",
    "Pipeline",
    "RunTrace",
    "SearchSpace",
    "TuneConfig",
    "best_in_history",
    "encode",
    "incumbent_loss",
    "incumbent_curve",
    "query_epoch",
    "sample_pipeline",
    "tune",
    "__version__",
]
