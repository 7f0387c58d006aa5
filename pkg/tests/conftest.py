"""Shared fixtures: pretrained bundles and converged estimators.

The heavy artifacts (frozen task bundles, trained tolerance-map
estimators) are built once per session and shared between the module
tests and the acceptance suite.  Build durations are recorded so the
acceptance suite can account pretraining and training time against its
budget.
"""

import time

import pytest
import torch

from featjnd.estimator import EstimatorConfig
from featjnd.taskbench import make_cls_bundle, make_pyramid_bundle
from featjnd.training import TrainConfig, train_loop

torch.manual_seed(0)

BUNDLE_SEED = 0


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def cls_bundle(timings):
    t0 = time.perf_counter()
    bundle = make_cls_bundle(seed=BUNDLE_SEED)
    timings["cls_bundle"] = time.perf_counter() - t0
    return bundle


@pytest.fixture(scope="session")
def pyramid_bundle(timings):
    t0 = time.perf_counter()
    bundle = make_pyramid_bundle(seed=BUNDLE_SEED)
    timings["pyramid_bundle"] = time.perf_counter() - t0
    return bundle


@pytest.fixture(scope="session")
def cls_train_config():
    return TrainConfig(
        lambda_t=50.0,
        temperature=4.0,
        learning_rate=1e-4,
        batch_size=64,
        epochs=30,
        grad_clip_norm=1.0,
        task="classification",
        seed=0,
    )


@pytest.fixture(scope="session")
def pyramid_train_config():
    return TrainConfig(
        lambda_t=200.0,
        temperature=4.0,
        learning_rate=2e-5,
        batch_size=16,
        epochs=30,
        grad_clip_norm=1.0,
        task="instance_segmentation",
        seed=0,
    )


@pytest.fixture(scope="session")
def trained_cls(cls_bundle, cls_train_config, timings):
    """(estimator, per-epoch log) for the converged classification run."""
    t0 = time.perf_counter()
    result = train_loop(cls_bundle, cls_train_config, EstimatorConfig(in_channels=cls_bundle.feature_channels))
    timings["trained_cls"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def trained_pyramid(pyramid_bundle, pyramid_train_config, timings):
    t0 = time.perf_counter()
    result = train_loop(
        pyramid_bundle, pyramid_train_config, EstimatorConfig(in_channels=pyramid_bundle.feature_channels)
    )
    timings["trained_pyramid"] = time.perf_counter() - t0
    return result
