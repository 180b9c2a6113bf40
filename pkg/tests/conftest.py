"""Shared fixtures for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from fdcam.backend import make_tiny_test_cnn


@pytest.fixture(scope="session")
def tiny():
    return make_tiny_test_cnn(0)


@pytest.fixture(scope="session")
def tiny_logit():
    return make_tiny_test_cnn(0, score_mode="logit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image(rng):
    return rng.random((32, 32, 3))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Seed-0 tiny CNN trained on a 100-per-class shapes dataset (60 val images)."""
    import time
    from types import SimpleNamespace

    from fdcam.shapes import ShapesDatasetSpec, train_tiny, write_shapes_dataset

    start = time.perf_counter()
    data = write_shapes_dataset(ShapesDatasetSpec(samples_per_class=100, seed=0),
                                tmp_path_factory.mktemp("shapes"))
    model, metrics = train_tiny(data, seed=0)
    return SimpleNamespace(data=data, model=model, metrics=metrics, seconds=time.perf_counter() - start)
