import numpy as np
import pytest

from graybo import benchtab
from graybo.core import (
    CATEGORICAL,
    NUMERIC,
    ORDINAL,
    Condition,
    HyperparamDim,
    MetaFeatures,
    ModelInfo,
    SearchSpace,
)
from graybo.rng import substream


@pytest.fixture(scope="session")
def small_space() -> SearchSpace:
    """Three-model space with a conditional momentum dim."""
    dims = (
        HyperparamDim(name="lr", kind=NUMERIC, lo=1e-5, hi=1e-1, scale="log"),
        HyperparamDim(name="dropout", kind=NUMERIC, lo=0.0, hi=0.5),
        HyperparamDim(name="batch_size", kind=ORDINAL, choices=(16, 32, 64, 128)),
        HyperparamDim(name="optimizer", kind=CATEGORICAL, choices=("sgd", "sgd_momentum", "adam")),
        HyperparamDim(
            name="momentum",
            kind=NUMERIC,
            lo=0.5,
            hi=0.99,
            condition=Condition(parent="optimizer", values=("sgd_momentum",)),
        ),
    )
    hub = (
        ModelInfo(name="m00", param_count=2.0, upstream_accuracy=78.0),
        ModelInfo(name="m01", param_count=10.0, upstream_accuracy=85.0),
        ModelInfo(name="m02", param_count=40.0, upstream_accuracy=90.0),
    )
    return SearchSpace(dims=dims, hub=hub)


@pytest.fixture(scope="session")
def meta_features() -> MetaFeatures:
    return MetaFeatures(n_samples=5000, resolution=128, channels=3, classes=20)


@pytest.fixture(scope="session")
def tiny_bench(small_space):
    """Small deterministic benchmark shared by optimizer-level tests."""
    cfg = benchtab.GeneratorConfig(
        n_clusters=2,
        n_datasets=4,
        n_models=3,
        configs_per_dataset=12,
        n_epochs=10,
        obs_noise=0.01,
        cost_base=1.0,
        seed=7,
    )
    md = benchtab.generate(cfg, small_space)
    return benchtab.TabularBenchmark(md)


@pytest.fixture()
def rng():
    return substream(123, "tests")
